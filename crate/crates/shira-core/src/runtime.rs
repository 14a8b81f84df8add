//! Adapter hot-swapping runtime.
