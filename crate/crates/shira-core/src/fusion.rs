//! Multi-adapter fusion.
