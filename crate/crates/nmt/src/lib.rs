//! A from-scratch, CPU-only neural machine translation toolkit.
//!
//! The pieces, bottom to top:
//!
//! - [`tensor`]: dense row-major tensors and the numeric kernels.
//! - [`graph`]: dynamic computation graphs with reverse-mode gradients,
//!   built per example and discarded after each step.
//! - [`optim`]: SGD, momentum, Adagrad, Adam, gradient clipping.
//! - [`layers`]: embeddings, feed-forward layers, RNN/LSTM/GRU cells,
//!   dropout, weight initialization.
//! - [`lm`]: feed-forward and recurrent language models, noise-contrastive
//!   and self-normalizing objectives, perplexity.
//! - [`seq2seq`]: the attention encoder-decoder translation model with
//!   bidirectional encoding, coverage, guided alignment, deep variants, and
//!   self-attention layers.
//! - [`decode`]: greedy and beam search, forced decoding, ensembles,
//!   n-best reranking.
//! - [`bpe`]: byte-pair-encoding subword learner and segmenter.
//! - [`data`]: vocabularies, corpora, batching with padding and masks,
//!   early stopping.
//! - [`config`], [`checkpoint`], [`train`], [`commands`]: configuration,
//!   model serialization, and the drivers behind the `nmt` binary.
//!
//! The `examples/` directory has one runnable program per major capability;
//! `nmt --help` lists the command-line surface.

pub mod bpe;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod graph;
pub mod layers;
pub mod lm;
pub mod optim;
pub mod seq2seq;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
