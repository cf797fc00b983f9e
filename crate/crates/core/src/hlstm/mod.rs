//! H-LSTM cells, the character language model built on them, and the
//! truncated-BPTT training loop.

mod cell;
mod corpus;
mod model;
mod train;

pub use cell::{CellDims, CellState, Dropout, Gate, GateKind, HlstmCell, StepCache};
pub use corpus::{batchify, Corpus, SplitRatios, Vocab, Window};
pub use model::{
    perplexity, softmax_nll, LayerId, LayerPart, LmModel, ModelSpec, ParamCount, UnrollCache,
    Unrolled,
};
pub use train::{gradient_pass, train_epoch, BridgingMode, GradAccumulator, LrState, TrainConfig};
