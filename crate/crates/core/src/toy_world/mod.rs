//! Desk-scale stand-in for an image captioner and its object detector.
//!
//! Scenes play the role of detector output; [`ToyPolicy`] is a log-linear
//! captioner conditioned on the scene, pretrained on captions that sometimes
//! mention an absent but usually co-occurring object.

mod policy;
mod world;

pub use policy::{
    Checkpoint, SamplingConfig, SceneFeatures, TokenId, TokenKind, ToyPolicy, Vocabulary, CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION, EOS_TOKEN,
};
pub use world::{
    corpus_nll, default_connectives, gen_scene, pretrain_reference, synth_caption, CorpusConfig, Scene, SceneSize,
    World, WorldConfig,
};
