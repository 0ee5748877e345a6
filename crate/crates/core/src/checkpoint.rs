//! Training checkpoints: parameters and optimizer moments in an OBT container,
//! configuration and curves in a JSON sidecar (`<path>.json`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::to_json_pretty;
use crate::model::{Model, ModelConfig, Role};
use crate::obt::{Obt, ObtEntry, TensorData};
use crate::params::Adam;
use crate::prompt_encoder::AgpeConfig;
use crate::train::TrainState;

const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub role: Role,
    pub model: ModelConfig,
    pub agpe: AgpeConfig,
    pub step: u64,
    pub seed: u64,
    pub lr: f64,
    pub optimizer_step: u64,
    pub loss_curve: Vec<f64>,
    pub aux_curve: Vec<f64>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn state_to_obt(state: &TrainState) -> Obt {
    let mut obt = Obt::from_store(&state.model.params);
    let (m, v) = state.optimizer.moments();
    for (prefix, map) in [(M_PREFIX, m), (V_PREFIX, v)] {
        for (name, vals) in map {
            let e = ObtEntry::new(format!("{prefix}{name}"), vec![vals.len() as u64], TensorData::F64(vals.clone()))
                .expect("rank-1 entry");
            obt.push(e).expect("prefixed names are unique");
        }
    }
    obt
}

pub fn save_state(path: &Path, state: &TrainState) -> Result<()> {
    state_to_obt(state).save(path)?;
    let side = Sidecar {
        role: state.model.role,
        model: state.model.config.clone(),
        agpe: state.model.agpe.clone(),
        step: state.step,
        seed: state.seed,
        lr: state.optimizer.lr,
        optimizer_step: state.optimizer.steps(),
        loss_curve: state.loss_curve.clone(),
        aux_curve: state.aux_curve.clone(),
    };
    std::fs::write(sidecar_path(path), to_json_pretty(&side)?)?;
    Ok(())
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let obt = Obt::load(path)?;
    let mut model = Model::init(&side.model, &side.agpe, side.role, 0)?;
    let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
    let mut seen = 0;
    for e in obt.entries() {
        if let Some(n) = e.name.strip_prefix(M_PREFIX) {
            m.insert(n.to_string(), e.data.to_f64());
        } else if let Some(n) = e.name.strip_prefix(V_PREFIX) {
            v.insert(n.to_string(), e.data.to_f64());
        } else {
            let slot = model.params.get_mut(&e.name).map_err(|_| Error::Format(format!("unexpected tensor {:?}", e.name)))?;
            let t = e.to_tensor();
            if t.shape() != slot.shape() {
                return Err(Error::DimMismatch(format!("{}: {:?} vs {:?}", e.name, t.shape(), slot.shape())));
            }
            *slot = t;
            seen += 1;
        }
    }
    if seen != model.params.len() {
        let missing = model.params.names().find(|n| obt.get(n).is_none()).cloned().unwrap_or_default();
        return Err(Error::MissingTensor(missing));
    }
    Ok(TrainState {
        model,
        optimizer: Adam::restore(side.lr, side.optimizer_step, m, v),
        step: side.step,
        loss_curve: side.loss_curve,
        aux_curve: side.aux_curve,
        seed: side.seed,
    })
}

/// Loads only the model of a checkpoint.
pub fn load_model(path: &Path) -> Result<Model> {
    Ok(load_state(path)?.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneSpec};
    use crate::train::teacher_step;

    fn small() -> (ModelConfig, AgpeConfig) {
        let cfg = ModelConfig {
            encoder_channels: vec![8],
            attn_dim: 8,
            decoder_blocks: 1,
            ..ModelConfig::default()
        };
        (cfg, AgpeConfig::default())
    }

    #[test]
    fn round_trip_resumes_identically() {
        let (cfg, agpe) = small();
        let m = Model::init(&cfg, &agpe, Role::Teacher, 3).unwrap();
        let mut st = TrainState::new(m, 1e-3, 3);
        let scene = generate_scene(&SceneSpec { seed: 4, ..SceneSpec::default() }).unwrap();
        teacher_step(&mut st, &scene).unwrap();
        st.loss_curve.push(0.5);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.obt");
        save_state(&p, &st).unwrap();
        let mut back = load_state(&p).unwrap();
        assert_eq!(back.model, st.model);
        assert_eq!(back.loss_curve, st.loss_curve);
        assert_eq!(back.optimizer.moments(), st.optimizer.moments());
        teacher_step(&mut st, &scene).unwrap();
        teacher_step(&mut back, &scene).unwrap();
        assert_eq!(back.model.params, st.model.params);
    }

    #[test]
    fn missing_tensor_rejected() {
        let (cfg, agpe) = small();
        let st = TrainState::new(Model::init(&cfg, &agpe, Role::Student, 0).unwrap(), 1e-3, 0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.obt");
        save_state(&p, &st).unwrap();
        let mut obt = Obt::new();
        for e in Obt::load(&p).unwrap().entries().iter().skip(1) {
            obt.push(e.clone()).unwrap();
        }
        obt.save(&p).unwrap();
        assert!(matches!(load_state(&p), Err(Error::MissingTensor(_))));
    }
}
