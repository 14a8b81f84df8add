//! Seeded synthetic classification tasks.
