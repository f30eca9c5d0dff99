// bench-only crate
