//! Gradient-masked finetuning.
