//! Holds the `acceptance` test target: `cargo test -p phybridge-validation`.
