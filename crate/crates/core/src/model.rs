//! Backbone plus optional heads in one parameter store, and checkpointing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::downstream::{Task, TaskHeads};
use crate::embedding::{
    AblationFlags, ComposedSequence, Corruption, Embedding, EmbeddingConfig, VocabSizes,
};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::event_data::EncodedStay;
use crate::numerics::{Checkpoint, Graph, ParamStore, Var};
use crate::pretrain::PretrainHeads;
use crate::seeding::derive_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: VocabSizes,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    /// Seeds parameter initialization.
    #[serde(default)]
    pub seed: u64,
}

/// Which heads a checkpoint carries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub pretrain: bool,
    pub tasks: Vec<Task>,
    pub head_dropout: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    heads: HeadLayout,
}

/// Outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub seq: ComposedSequence,
    /// `[T × d]` final hidden states.
    pub hidden: Var,
    /// `[1 × d]` attention-pooled stay representation.
    pub pooled: Var,
}

#[derive(Clone, Debug)]
pub struct PulseModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedding: Embedding,
    pub encoder: Encoder,
    pub pretrain_heads: Option<PretrainHeads>,
    pub task_heads: Option<TaskHeads>,
}

impl PulseModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut rng = derive_rng(config.seed, "backbone", &[]);
        let mut store = ParamStore::new();
        let enc = config.encoder;
        let embedding = Embedding::new(
            &mut store,
            config.vocab,
            enc.d_model,
            enc.max_tokens,
            config.embedding,
            &mut rng,
        );
        let encoder = Encoder::new(&mut store, enc, &mut rng)?;
        Ok(Self {
            config,
            store,
            embedding,
            encoder,
            pretrain_heads: None,
            task_heads: None,
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.encoder.d_model
    }

    pub fn add_pretrain_heads(&mut self) -> PretrainHeads {
        if let Some(h) = self.pretrain_heads {
            return h;
        }
        let mut rng = derive_rng(self.config.seed, "pretrain_heads", &[]);
        let (d, v, std) = (
            self.d_model(),
            self.config.vocab.event,
            self.config.encoder.init_std,
        );
        let heads = PretrainHeads::new(&mut self.store, d, v, std, &mut rng);
        self.pretrain_heads = Some(heads);
        heads
    }

    /// Adds (or replaces the handles of) task heads. Heads already present in
    /// the store under the same names are reused.
    pub fn add_task_heads(
        &mut self,
        tasks: &[Task],
        dropout: f64,
        seed: u64,
    ) -> Result<&TaskHeads> {
        let mut rng = derive_rng(seed, "task_heads", &[]);
        let (d, std) = (self.d_model(), self.config.encoder.init_std);
        let heads = TaskHeads::new(&mut self.store, tasks, d, dropout, std, &mut rng)?;
        self.task_heads = Some(heads);
        Ok(self.task_heads.as_ref().unwrap())
    }

    pub fn head_layout(&self) -> HeadLayout {
        HeadLayout {
            pretrain: self.pretrain_heads.is_some(),
            tasks: self
                .task_heads
                .as_ref()
                .map(|h| h.tasks())
                .unwrap_or_default(),
            head_dropout: self.task_heads.as_ref().map_or(0.0, |h| h.dropout),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        stay: &EncodedStay,
        corruption: &Corruption,
    ) -> Result<Forward> {
        self.forward_with(g, stay, corruption, self.config.embedding.ablation)
    }

    pub fn forward_with(
        &self,
        g: &mut Graph,
        stay: &EncodedStay,
        corruption: &Corruption,
        flags: AblationFlags,
    ) -> Result<Forward> {
        let seq =
            self.embedding
                .assemble_sequence(g, &self.store, stay, corruption, flags, None)?;
        let hidden = self.encoder.encode(g, &self.store, &seq)?;
        let pooled = self
            .encoder
            .attention_pool(g, &self.store, hidden, &seq.valid)?;
        Ok(Forward {
            seq,
            hidden,
            pooled,
        })
    }

    /// Pooled representation in evaluation mode.
    pub fn represent(&self, stay: &EncodedStay) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, stay, &Corruption::none())?;
        Ok(g.value(f.pooled).data().to_vec())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            model: self.config.clone(),
            heads: self.head_layout(),
        };
        let config_json = serde_json::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Checkpoint {
            config_json,
            params: self.store.clone(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)?;
        Ok(())
    }

    /// Rebuilds the model and every head recorded in the checkpoint; all
    /// parameters must be present.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_str(&ckpt.config_json).map_err(|e| Error::Config(e.to_string()))?;
        let mut model = Self::new(meta.model)?;
        if meta.heads.pretrain {
            model.add_pretrain_heads();
        }
        if !meta.heads.tasks.is_empty() {
            model.add_task_heads(&meta.heads.tasks, meta.heads.head_dropout, 0)?;
        }
        let copied = model.store.load_matching(&ckpt.params);
        if copied != model.store.len() || copied != ckpt.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} parameters, model expects {}, {} matched",
                ckpt.params.len(),
                model.store.len(),
                copied
            )));
        }
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ckpt = Checkpoint::load(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::from_checkpoint(&ckpt)
    }

    /// Copies backbone weights (embedding and encoder) from a checkpoint,
    /// ignoring its heads. Returns the number of tensors copied.
    pub fn load_backbone(&mut self, ckpt: &Checkpoint) -> Result<usize> {
        let meta: CheckpointMeta =
            serde_json::from_str(&ckpt.config_json).map_err(|e| Error::Config(e.to_string()))?;
        if meta.model.encoder != self.config.encoder || meta.model.vocab != self.config.vocab {
            return Err(Error::Config(
                "checkpoint backbone shape differs from this model".into(),
            ));
        }
        let mut backbone = ParamStore::new();
        for id in ckpt.params.ids() {
            let name = ckpt.params.name(id);
            if name.starts_with("embed.") || name.starts_with("encoder.") {
                backbone.insert(name, ckpt.params.get(id).clone(), ckpt.params.group(id));
            }
        }
        Ok(self.store.load_matching(&backbone))
    }
}
