//! Toy-scale vision-language dual encoder with four adaptation strategies
//! for binary real/fake image detection, plus the evaluation harness
//! (AP/accuracy, post-processing robustness, few-shot, train-size ablation)
//! over procedurally generated image families.

pub mod adapt;
pub mod data;
pub mod eval;
pub mod experiments;
pub mod io;
pub mod model;
pub mod tensor;
