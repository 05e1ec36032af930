//! Named parameter storage with group-level freeze flags.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{bail, Mat, Result};

/// Parameter groups. Every parameter belongs to exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    VisionEmbed,
    VisionBlocks,
    AttnPool,
    TextEmbed,
    TextBlocks,
    MultimodalDecoder,
    Connector,
    ToyLm,
}

impl Group {
    pub const ALL: [Group; 8] = [
        Group::VisionEmbed,
        Group::VisionBlocks,
        Group::AttnPool,
        Group::TextEmbed,
        Group::TextBlocks,
        Group::MultimodalDecoder,
        Group::Connector,
        Group::ToyLm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::VisionEmbed => "vision_embed",
            Group::VisionBlocks => "vision_blocks",
            Group::AttnPool => "attn_pool",
            Group::TextEmbed => "text_embed",
            Group::TextBlocks => "text_blocks",
            Group::MultimodalDecoder => "multimodal_decoder",
            Group::Connector => "connector",
            Group::ToyLm => "toy_lm",
        }
    }

    pub fn parse(s: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.as_str() == s)
    }

    /// Groups making up the image encoder seen by downstream consumers.
    pub fn is_vision(self) -> bool {
        matches!(
            self,
            Group::VisionEmbed | Group::VisionBlocks | Group::AttnPool
        )
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Mat,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// How a new parameter is initialised.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Normal with std `1/sqrt(rows)`, for weights used as `x * W`.
    FanIn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    trainable: [bool; 8],
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            trainable: [true; 8],
        }
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        group: Group,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        debug_assert!(
            self.find(name).is_none(),
            "duplicate parameter name {name}"
        );
        let mut value = Mat::zeros(rows, cols);
        let std = match init {
            Init::Zeros => None,
            Init::Ones => {
                value.data.iter_mut().for_each(|v| *v = 1.0);
                None
            }
            Init::Normal(s) => Some(s),
            Init::FanIn => Some(1.0 / crate::math::sqrt(rows.max(1) as f64)),
        };
        if let Some(std) = std {
            let dist = Normal::new(0.0, std).expect("finite std");
            value.data.iter_mut().for_each(|v| *v = dist.sample(rng));
        }
        let decay = matches!(init, Init::FanIn | Init::Normal(_)) && rows > 1 && cols > 1;
        self.params.push(Param {
            name: name.to_string(),
            group,
            value,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.params.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
    }

    pub fn ids_in(&self, group: Group) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn set_trainable(&mut self, group: Group, trainable: bool) {
        self.trainable[group.index()] = trainable;
    }

    pub fn is_group_trainable(&self, group: Group) -> bool {
        self.trainable[group.index()]
    }

    #[inline]
    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[self.params[id.0].group.index()]
    }

    pub fn trainable_groups(&self) -> Vec<Group> {
        Group::ALL
            .into_iter()
            .filter(|g| self.is_group_trainable(*g))
            .collect()
    }

    pub fn set_only_trainable(&mut self, groups: &[Group]) {
        for g in Group::ALL {
            self.set_trainable(g, groups.contains(&g));
        }
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.data.len()).sum()
    }

    /// Copy of all values belonging to `group`, for bitwise comparisons.
    pub fn snapshot(&self, group: Group) -> Vec<Mat> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.clone())
            .collect()
    }

    /// Replace the value of a named parameter, checking its shape.
    pub fn load_value(&mut self, name: &str, value: Mat) -> Result<()> {
        let Some(id) = self.find(name) else {
            bail!(Invalid, "unknown parameter {name}");
        };
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            bail!(
                Shape,
                "parameter {name}: expected {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            );
        }
        p.value = value;
        Ok(())
    }

    /// FNV-1a over every value bit pattern in the given groups.
    pub fn checksum(&self, groups: &[Group]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().filter(|p| groups.contains(&p.group)) {
            for v in &p.value.data {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}
