//! Dense and convolutional layers with hand-written backpropagation.

pub mod head;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod student;

pub use head::{argmax_rows, train_head, ClassifierHead, HEAD_HIDDEN};
pub use loss::{cross_entropy, kl_distill_loss, softmax};
pub use optim::{Optimizer, OptimizerKind, TrainConfig};
pub use student::{train_student, Mode, StudentArch, StudentModel, StudentReport};
