//! The bundle of trained components that make up one generation pipeline.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conditioner::{Conditioner, ConditionerConfig, BACKBONE_PREFIX};
use crate::error::{Error, Result};
use crate::numerics::ParamStore;
use crate::objectives::MseHead;
use crate::rng::stream;
use crate::velocity::{VelocityConfig, VelocityNet};
use crate::world::{LatentSpace, PixelCodec, SemanticDecoder, World, WorldConfig};

/// The three generation designs under comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    ClipMse,
    ClipFm,
    VaeFm,
}

impl Pipeline {
    pub const ALL: [Pipeline; 3] = [Pipeline::ClipMse, Pipeline::ClipFm, Pipeline::VaeFm];

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::ClipMse => "clip_mse",
            Pipeline::ClipFm => "clip_fm",
            Pipeline::VaeFm => "vae_fm",
        }
    }

    /// Space of the latent the generation head produces.
    pub fn space(self) -> LatentSpace {
        match self {
            Pipeline::ClipMse | Pipeline::ClipFm => LatentSpace::Semantic,
            Pipeline::VaeFm => LatentSpace::Pixel,
        }
    }

    pub fn uses_flow(self) -> bool {
        self != Pipeline::ClipMse
    }

    /// Components that must be trained before `generate` can run.
    pub fn requires(self) -> &'static [Component] {
        match self {
            Pipeline::ClipMse => &[Component::Understanding, Component::MseHead, Component::SemanticDecoder],
            Pipeline::ClipFm => &[Component::Understanding, Component::Velocity, Component::SemanticDecoder],
            Pipeline::VaeFm => &[Component::Understanding, Component::Velocity],
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pipeline::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config("pipeline", format!("unknown pipeline `{s}`")))
    }
}

/// Separately trained pieces of a pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Understanding,
    SemanticDecoder,
    MseHead,
    Velocity,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Understanding => "understanding",
            Component::SemanticDecoder => "semantic_decoder",
            Component::MseHead => "mse_head",
            Component::Velocity => "velocity",
        })
    }
}

/// Seed stream ids for parameter initialization, one per component.
const INIT_CONDITIONER: u64 = 0x10;
const INIT_MSE_HEAD: u64 = 0x11;
const INIT_VELOCITY: u64 = 0x12;

/// Every parameter of a run in one store, plus the layer handles bound to it.
#[derive(Clone, Debug)]
pub struct Models {
    pub world: WorldConfig,
    pub store: ParamStore,
    pub conditioner: Conditioner,
    pub mse_head: Option<MseHead>,
    pub velocity: Option<VelocityNet>,
    pub decoder: Option<SemanticDecoder>,
    pub codec: PixelCodec,
    pub trained: BTreeSet<Component>,
}

impl Models {
    /// Fresh, untrained conditioner for `world`, initialized from `seed`.
    pub fn new(world: &World, cfg: ConditionerConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let conditioner = Conditioner::new(&mut store, cfg, &mut stream(seed, INIT_CONDITIONER))?;
        Ok(Self {
            world: world.config,
            store,
            conditioner,
            mse_head: None,
            velocity: None,
            decoder: None,
            codec: world.codec.clone(),
            trained: BTreeSet::new(),
        })
    }

    pub fn is_trained(&self, c: Component) -> bool {
        self.trained.contains(&c)
    }

    pub fn require(&self, c: Component) -> Result<()> {
        if self.is_trained(c) {
            Ok(())
        } else {
            Err(Error::MissingStage(c.to_string()))
        }
    }

    /// Checks that every component of `pipeline` has been trained and that
    /// the velocity net (if any) targets the pipeline's space.
    pub fn require_pipeline(&self, pipeline: Pipeline) -> Result<()> {
        for &c in pipeline.requires() {
            self.require(c)?;
        }
        if pipeline.uses_flow() {
            let net = self.velocity.as_ref().ok_or_else(|| Error::MissingStage("velocity".into()))?;
            if net.cfg.space != pipeline.space() {
                return Err(Error::MissingStage(format!(
                    "velocity for {:?} latents (have {:?})",
                    pipeline.space(),
                    net.cfg.space
                )));
            }
        }
        Ok(())
    }

    pub fn ensure_mse_head(&mut self, seed: u64) -> Result<&MseHead> {
        if self.mse_head.is_none() {
            let head = MseHead::new(&mut self.store, self.conditioner.cfg.d_model, &mut stream(seed, INIT_MSE_HEAD))?;
            self.mse_head = Some(head);
        }
        Ok(self.mse_head.as_ref().expect("just set"))
    }

    pub fn ensure_velocity(&mut self, cfg: VelocityConfig, seed: u64) -> Result<&VelocityNet> {
        if let Some(net) = &self.velocity {
            if net.cfg != cfg {
                return Err(Error::config(
                    "velocity",
                    "checkpoint already holds a velocity net with a different configuration",
                ));
            }
        } else {
            let net = VelocityNet::new(&mut self.store, cfg, &mut stream(seed, INIT_VELOCITY))?;
            self.velocity = Some(net);
        }
        Ok(self.velocity.as_ref().expect("just set"))
    }

    /// Hash of every backbone parameter (queries excluded).
    pub fn backbone_hash(&self) -> String {
        self.store.hash_prefix(BACKBONE_PREFIX)
    }
}
