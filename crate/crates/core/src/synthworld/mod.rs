//! Synthetic scenes of colored shapes, stand-ins for detector features,
//! with captions at two granularities and templated QA.

pub mod caption;
pub mod corpus;
pub mod nlvr;
pub mod oracle;
pub mod qa;
pub mod scene;
pub mod vocab;

pub use caption::{gen_caption, Level};
pub use corpus::{build_corpus, corpus_hash, Corpus, Record, Split};
pub use nlvr::{gen_nlvr, NlvrItem};
pub use qa::{gen_qa, QaItem};
pub use scene::{gen_scene, Scene, SceneObject};
pub use vocab::{Vocab, ANSWERS};
