pub use mtmct_core as core;
