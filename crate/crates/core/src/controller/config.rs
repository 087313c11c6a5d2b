use std::fmt;

use crate::error::{OramError, Result};
use crate::nvm::CostModel;
use crate::posmap_backend::{PosMapKind, RecursiveParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PersistMode {
    Baseline,
    FullNvm,
    Fp,
    Ehap,
    RcrBaseline,
    RcrEhap,
}

impl PersistMode {
    pub const ALL: [PersistMode; 6] = [
        PersistMode::Baseline,
        PersistMode::FullNvm,
        PersistMode::Fp,
        PersistMode::Ehap,
        PersistMode::RcrBaseline,
        PersistMode::RcrEhap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PersistMode::Baseline => "baseline",
            PersistMode::FullNvm => "fullnvm",
            PersistMode::Fp => "fp",
            PersistMode::Ehap => "ehap",
            PersistMode::RcrBaseline => "rcr-baseline",
            PersistMode::RcrEhap => "rcr-ehap",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| OramError::Config(format!("unknown mode `{s}`")))
    }

    /// Modes that stage remaps and commit them in atomic WPQ rounds.
    pub fn uses_rounds(self) -> bool {
        matches!(self, PersistMode::Fp | PersistMode::Ehap | PersistMode::RcrEhap)
    }

    pub fn is_recursive(self) -> bool {
        matches!(self, PersistMode::RcrBaseline | PersistMode::RcrEhap)
    }
}

impl fmt::Display for PersistMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OramConfig {
    pub mode: PersistMode,
    pub posmap: PosMapKind,
    pub height: u32,
    pub z: usize,
    pub stash_capacity: usize,
    pub block_size: usize,
    /// Real blocks; defaults to `2^height`.
    pub blocks: Option<usize>,
    pub recursion: RecursiveParams,
    pub cost: CostModel,
    pub seed: u64,
}

impl Default for OramConfig {
    fn default() -> Self {
        OramConfig {
            mode: PersistMode::Ehap,
            posmap: PosMapKind::Direct,
            height: 7,
            z: 4,
            stash_capacity: 200,
            block_size: 64,
            blocks: None,
            recursion: RecursiveParams::default(),
            cost: CostModel::default(),
            seed: 1,
        }
    }
}

impl OramConfig {
    pub fn with_mode(mut self, mode: PersistMode) -> Self {
        self.mode = mode;
        if mode.is_recursive() {
            self.posmap = PosMapKind::Recursive;
        } else if self.posmap == PosMapKind::Recursive {
            self.posmap = PosMapKind::Direct;
        }
        self
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.unwrap_or(1usize << self.height)
    }

    /// Folds `--posmap recursive` into the mode and checks every constraint.
    pub fn normalized(mut self) -> Result<Self> {
        match (self.mode, self.posmap) {
            (PersistMode::Baseline, PosMapKind::Recursive) => self.mode = PersistMode::RcrBaseline,
            (PersistMode::Ehap, PosMapKind::Recursive) => self.mode = PersistMode::RcrEhap,
            (m, PosMapKind::Recursive) if !m.is_recursive() => {
                return Err(OramError::Config(format!(
                    "mode {m} has no recursive position map variant"
                )))
            }
            (m, _) if m.is_recursive() => self.posmap = PosMapKind::Recursive,
            (PersistMode::Fp, PosMapKind::Oblivious) => {
                return Err(OramError::Config(
                    "fp keeps its position map in a write-only tree; oblivious sweep does not apply"
                        .into(),
                ))
            }
            _ => {}
        }
        if self.height > 20 {
            return Err(OramError::Config(format!("levels {} above 20", self.height)));
        }
        if self.z == 0 || self.stash_capacity == 0 || self.block_size == 0 {
            return Err(OramError::Config("z, stash and block size must be positive".into()));
        }
        let n = self.n_blocks();
        let slots = self.z * ((1usize << (self.height + 1)) - 1);
        if n == 0 || n > slots || n > u32::MAX as usize {
            return Err(OramError::Config(format!(
                "{n} blocks do not fit a tree of {slots} slots"
            )));
        }
        self.cost.validate()?;
        Ok(self)
    }

    /// Flat `key = value` lines, the format of the config file and of the
    /// image metadata.
    pub fn to_kv(&self) -> String {
        let c = &self.cost;
        let mut out = format!(
            "mode = {}\nposmap = {}\nlevels = {}\nz = {}\nstash = {}\nblock_size = {}\n\
             rcr_levels = {}\nrcr_pack = {}\nonchip_entries = {}\n\
             t_read_nvm = {}\nt_write_nvm = {}\nt_read_volatile = {}\nt_write_volatile = {}\nseed = {}\n",
            self.mode,
            self.posmap.name(),
            self.height,
            self.z,
            self.stash_capacity,
            self.block_size,
            self.recursion.levels,
            self.recursion.pack,
            self.recursion.onchip_entries,
            c.t_read_nvm,
            c.t_write_nvm,
            c.t_read_volatile,
            c.t_write_volatile,
            self.seed,
        );
        if let Some(n) = self.blocks {
            out.push_str(&format!("blocks = {n}\n"));
        }
        out
    }

    /// Applies one setting. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| OramError::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        match key {
            "mode" => self.mode = PersistMode::parse(value)?,
            "posmap" => self.posmap = PosMapKind::parse(value)?,
            "levels" => self.height = num(key, value)?,
            "z" => self.z = num(key, value)?,
            "stash" => self.stash_capacity = num(key, value)?,
            "block_size" => self.block_size = num(key, value)?,
            "blocks" => self.blocks = Some(num(key, value)?),
            "rcr_levels" => self.recursion.levels = num(key, value)?,
            "rcr_pack" => self.recursion.pack = num(key, value)?,
            "onchip_entries" => self.recursion.onchip_entries = num(key, value)?,
            "t_read_nvm" => self.cost.t_read_nvm = num(key, value)?,
            "t_write_nvm" => self.cost.t_write_nvm = num(key, value)?,
            "t_read_volatile" => self.cost.t_read_volatile = num(key, value)?,
            "t_write_volatile" => self.cost.t_write_volatile = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(OramError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = OramConfig::default();
        for (key, value) in crate::config::parse_kv(text)? {
            cfg.set(&key, &value)?;
        }
        Ok(cfg)
    }
}
