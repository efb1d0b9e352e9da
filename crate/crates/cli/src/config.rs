//! Run configuration: built-in defaults, overlaid by a JSON file, overlaid by flags.

use std::path::Path;

use clap::ValueEnum;
use him::encoder::EncoderConfig;
use him::geometry::ManifoldKind;
use him::training::{PretrainConfig, TrainConfig};
use him::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// D=64, 2 blocks, tuned for a few hundred entities on one core.
    #[default]
    Desk,
    /// D=384, 4 blocks, the full-size hyperparameters.
    Paper,
}

impl Profile {
    pub fn encoder(self) -> EncoderConfig {
        match self {
            Profile::Desk => EncoderConfig::desk(),
            Profile::Paper => EncoderConfig::default(),
        }
    }

    pub fn train(self, kind: ManifoldKind) -> TrainConfig {
        match self {
            Profile::Desk => TrainConfig::desk(kind),
            Profile::Paper => TrainConfig {
                manifold: him::geometry::ManifoldConfig::new(kind),
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn defaults(profile: Profile) -> Self {
        Self {
            profile,
            encoder: profile.encoder(),
            train: profile.train(ManifoldKind::Lorentz),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainRunConfig {
    pub profile: Profile,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
}

impl PretrainRunConfig {
    pub fn defaults(profile: Profile) -> Self {
        Self {
            profile,
            encoder: profile.encoder(),
            pretrain: PretrainConfig::default(),
        }
    }
}

/// Recursively overwrite `base` with the fields present in `over`.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Defaults for the profile chosen by the flag, else the file, else desk,
/// with the file laid over them. Unknown keys anywhere are an error.
pub fn resolve<T, F>(file: Option<&Path>, profile_flag: Option<Profile>, defaults: F) -> Result<T>
where
    T: Serialize + DeserializeOwned,
    F: Fn(Profile) -> T,
{
    let file = file.map(read_json).transpose()?;
    if let Some(f) = &file {
        if !f.is_object() {
            return Err(Error::Invalid("config file must hold a JSON object".into()));
        }
    }
    let from_file = match file.as_ref().and_then(|f| f.get("profile")) {
        Some(p) => Some(serde_json::from_value::<Profile>(p.clone())?),
        None => None,
    };
    let profile = profile_flag.or(from_file).unwrap_or_default();
    let mut value = serde_json::to_value(defaults(profile))?;
    if let Some(mut f) = file {
        if let Some(obj) = f.as_object_mut() {
            obj.remove("profile");
        }
        merge(&mut value, f);
    }
    Ok(serde_json::from_value(value)?)
}
