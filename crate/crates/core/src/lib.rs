pub mod causal;
pub mod dataset;
pub mod error;
pub mod moments;
pub mod pipeline;
pub mod plot;
pub mod report;
pub mod search;
pub mod simulate;
pub mod responders;
pub mod survival;
