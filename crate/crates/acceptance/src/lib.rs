//! Holds the `acceptance` test target; run it with `cargo test -p stein-embed-acceptance`.
