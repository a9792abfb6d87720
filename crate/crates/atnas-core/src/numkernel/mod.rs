//! Dense-tensor numerical kernel with reverse-mode gradients for exactly
//! the operation set the search space needs.

pub mod cell;
pub mod head;
pub mod ops;
pub mod param;
pub mod tensor;

pub use cell::{cell_backward, cell_forward, CellTrace, GROUP_OFFSETS, GROUP_SIZES, NUM_EDGES};
pub use head::{head_backward, head_forward, HeadOutput, HeadTrace};
pub use ops::{op_backward, op_forward, OpTrace, NORM_EPS};
pub use param::{candidate_weight_count, OpKind, ParamBlock, CANDIDATES};
pub use tensor::Tensor4;
