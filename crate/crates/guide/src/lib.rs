//! Placeholder until book chapters exist.
