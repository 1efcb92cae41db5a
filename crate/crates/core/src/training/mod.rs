//! Dice-loss training with Adam on randomly sampled, augmented patches.

pub mod adam;
pub mod augment;
pub mod compare;
pub mod loss;
pub mod pretrain;
pub mod sampling;
pub mod trainer;

pub use adam::AdamState;
pub use augment::{augment_patch, AugmentConfig};
pub use compare::{compare_arms, Arm, ArmStat, Comparison, FinalComparison};
pub use loss::{multiple_dice_loss, DiceLoss};
pub use pretrain::{pretrain_encoder, PretrainConfig, Pretrained};
pub use sampling::{sample_patch, Patch};
pub use trainer::{
    batch_tensors, evaluate_region_dice, make_batch, mean_dice, train, train_with_progress, Case, EpochRecord, TrainConfig, TrainRun, Trained,
};
