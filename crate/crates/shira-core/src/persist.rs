//! Binary file formats.
