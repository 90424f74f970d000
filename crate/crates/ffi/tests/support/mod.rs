#![allow(dead_code)]

use std::path::{Path, PathBuf};

use revit::assigner::{Tla, TlaConfig};
use revit::io::save_checkpoint;
use revit::model::{ReViT, ReViTConfig};
use revit::numerics::{ParamStore, Tensor};

pub fn model_config() -> ReViTConfig {
    ReViTConfig {
        image_size: 8,
        channels: 3,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 4,
        grids: vec![(4, 4), (2, 2), (1, 1)],
        dropout: 0.0,
        ln_eps: 1e-6,
        shared_embed: false,
    }
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub model: ReViT,
    pub store: ParamStore<f32>,
    pub tla: Tla,
    pub tla_store: ParamStore<f32>,
}

impl Fixture {
    /// Random weights saved the way the CLI saves them.
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let cfg = model_config();
        let model = ReViT::new(cfg.clone()).unwrap();
        let store = model.init_params::<f32>(1);
        save_checkpoint(&store, &dir.path().join("revit.ckpt"), serde_json::to_value(&cfg).ok()).unwrap();
        let tla = Tla::new(TlaConfig::new(8, 3, 3)).unwrap();
        let mut tla_store = tla.init_params::<f32>(2);
        // Spread the routing over several lengths.
        let w = tla_store.get_mut("fc.weight").unwrap().data_mut();
        for (i, v) in w.iter_mut().enumerate() {
            *v = ((i * 7 % 11) as f32 - 5.0) * 2.0;
        }
        save_checkpoint(
            &tla_store,
            &dir.path().join("tla.ckpt"),
            serde_json::to_value(tla.config()).ok(),
        )
        .unwrap();
        Self {
            dir,
            model,
            store,
            tla,
            tla_store,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

pub fn images(batch: usize, seed: u32) -> Vec<f32> {
    (0..batch * 3 * 64)
        .map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f32 / 1000.0)
        .collect()
}

pub fn tensor(data: &[f32], batch: usize) -> Tensor<f32> {
    Tensor::from_vec(&[batch, 3, 8, 8], data.to_vec()).unwrap()
}

pub fn c_path(p: &Path) -> std::ffi::CString {
    std::ffi::CString::new(p.to_str().unwrap()).unwrap()
}
