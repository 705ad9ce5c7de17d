pub mod checkpoint;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod parser;
pub mod pretrain;
pub mod rng;
pub mod tensor;
pub mod tokenizer;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/tokenizer.md")]
    mod tokenizer {}
    #[doc = include_str!("../../../book/src/parser.md")]
    mod parser {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/pretraining.md")]
    mod pretraining {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
