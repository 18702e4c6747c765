pub mod cli;
pub mod eval;
pub mod graph;
pub mod llm;
pub mod pipeline;
pub mod protocol;
pub mod retrieval;

#[cfg(test)]
mod testing;
