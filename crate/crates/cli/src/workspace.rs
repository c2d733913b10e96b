//! On-disk layout of a pipeline workspace directory and typed load/store
//! helpers for every artifact in it.
//!
//! ```text
//! DIR/
//!   scene.gafs                      scene container
//!   supervision/cam00_color.gaft    per-view ground truth (color, masks,
//!              /cam00_masks.gaft    per-mask language features)
//!              /cam00_features.gaft
//!   preproc/pca_mean.gaft           PCA projection
//!          /pca_basis.gaft
//!          /pca_variance.gaft
//!          /codebook.gaft           structured language codebook
//!          /ld/cam00.gaft           derived LD feature maps
//!          /meta.txt                n_c, d, k range, seed
//!   stage1.gafc / stage2.gafc       checkpoints
//!   loss_stage1.csv / loss_stage2.csv
//!   metrics.csv
//!   out/                            query renderings and heatmaps
//! ```

use std::path::{Path, PathBuf};

use gaff_core::error::{Error, Result};
use gaff_core::preprocess::{Codebook, PcaProjection};
use gaff_core::scene::{ingest_supervision, LdMap, SceneModel, ViewSupervision};
use gaff_core::tensorio;

pub struct Workspace {
    pub dir: PathBuf,
}

impl Workspace {
    pub fn new(dir: &Path) -> Workspace {
        Workspace {
            dir: dir.to_path_buf(),
        }
    }

    pub fn scene_path(&self) -> PathBuf {
        self.dir.join("scene.gafs")
    }
    pub fn sup_dir(&self) -> PathBuf {
        self.dir.join("supervision")
    }
    pub fn sup_color(&self, cam: usize) -> PathBuf {
        self.sup_dir().join(format!("cam{cam:02}_color.gaft"))
    }
    pub fn sup_masks(&self, cam: usize) -> PathBuf {
        self.sup_dir().join(format!("cam{cam:02}_masks.gaft"))
    }
    pub fn sup_features(&self, cam: usize) -> PathBuf {
        self.sup_dir().join(format!("cam{cam:02}_features.gaft"))
    }
    pub fn preproc_dir(&self) -> PathBuf {
        self.dir.join("preproc")
    }
    pub fn pca_mean(&self) -> PathBuf {
        self.preproc_dir().join("pca_mean.gaft")
    }
    pub fn pca_basis(&self) -> PathBuf {
        self.preproc_dir().join("pca_basis.gaft")
    }
    pub fn pca_variance(&self) -> PathBuf {
        self.preproc_dir().join("pca_variance.gaft")
    }
    pub fn codebook_path(&self) -> PathBuf {
        self.preproc_dir().join("codebook.gaft")
    }
    pub fn ld_path(&self, cam: usize) -> PathBuf {
        self.preproc_dir().join("ld").join(format!("cam{cam:02}.gaft"))
    }
    pub fn meta_path(&self) -> PathBuf {
        self.preproc_dir().join("meta.txt")
    }
    pub fn stage1_path(&self) -> PathBuf {
        self.dir.join("stage1.gafc")
    }
    pub fn stage2_path(&self) -> PathBuf {
        self.dir.join("stage2.gafc")
    }
    pub fn loss_path(&self, stage: u8) -> PathBuf {
        self.dir.join(format!("loss_stage{stage}.csv"))
    }
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn out_dir(&self) -> PathBuf {
        self.dir.join("out")
    }

    pub fn load_scene(&self) -> Result<SceneModel> {
        let p = self.scene_path();
        if !p.exists() {
            return Err(Error::validation(format!(
                "no scene at {}; run 'gaff synth' or place a scene.gafs there",
                p.display()
            )));
        }
        gaff_core::scene::load_scene(&p)
    }

    pub fn save_supervision(&self, views: &[ViewSupervision]) -> Result<()> {
        std::fs::create_dir_all(self.sup_dir()).map_err(|e| Error::io(&self.sup_dir(), e))?;
        for (k, v) in views.iter().enumerate() {
            let (h, w) = (v.height as u64, v.width as u64);
            tensorio::write_tensor(&self.sup_color(k), &[h, w, 3], &v.color)?;
            let mask_f: Vec<f32> = v.masks.iter().map(|&m| m as f32).collect();
            tensorio::write_tensor(&self.sup_masks(k), &[h, w], &mask_f)?;
            tensorio::write_tensor(
                &self.sup_features(k),
                &[v.n_masks as u64, v.feature_dim as u64],
                &v.mask_features,
            )?;
        }
        Ok(())
    }

    pub fn load_supervision(&self, scene: &SceneModel) -> Result<Vec<ViewSupervision>> {
        let mut views = Vec::with_capacity(scene.cameras.len());
        for (k, cam) in scene.cameras.iter().enumerate() {
            let color = self.sup_color(k);
            if !color.exists() {
                return Err(Error::validation(format!(
                    "missing supervision for camera {k} at {}",
                    color.display()
                )));
            }
            views.push(ingest_supervision(
                &color,
                &self.sup_masks(k),
                &self.sup_features(k),
                cam.width as usize,
                cam.height as usize,
            )?);
        }
        Ok(views)
    }

    pub fn save_pca(&self, pca: &PcaProjection) -> Result<()> {
        let d = self.preproc_dir();
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        tensorio::write_tensor(&self.pca_mean(), &[pca.dim_high as u64], &pca.mean)?;
        tensorio::write_tensor(
            &self.pca_basis(),
            &[pca.dim_high as u64, pca.dim_low as u64],
            &pca.basis,
        )?;
        tensorio::write_tensor(
            &self.pca_variance(),
            &[pca.dim_low as u64],
            &pca.explained_variance,
        )
    }

    pub fn load_pca(&self) -> Result<PcaProjection> {
        if !self.pca_basis().exists() {
            return Err(Error::validation(format!(
                "no PCA artifacts under {}; run 'gaff preprocess' first",
                self.preproc_dir().display()
            )));
        }
        let (mdims, mean) = tensorio::read_tensor(&self.pca_mean())?;
        let (bdims, basis) = tensorio::read_tensor(&self.pca_basis())?;
        let (_, explained_variance) = tensorio::read_tensor(&self.pca_variance())?;
        if bdims.len() != 2 || mdims.len() != 1 || bdims[0] != mdims[0] {
            return Err(Error::format(&self.pca_basis(), "inconsistent PCA artifact shapes"));
        }
        Ok(PcaProjection {
            dim_high: bdims[0] as usize,
            dim_low: bdims[1] as usize,
            mean,
            basis,
            explained_variance,
        })
    }

    pub fn save_codebook(&self, cb: &Codebook) -> Result<()> {
        tensorio::write_tensor(
            &self.codebook_path(),
            &[cb.n_entries as u64, cb.dim as u64],
            &cb.entries,
        )
    }

    pub fn load_codebook(&self) -> Result<Codebook> {
        let p = self.codebook_path();
        if !p.exists() {
            return Err(Error::validation(format!(
                "no codebook at {}; run 'gaff preprocess' first",
                p.display()
            )));
        }
        let (dims, entries) = tensorio::read_tensor(&p)?;
        if dims.len() != 2 {
            return Err(Error::format(&p, "codebook tensor must be N_c x D"));
        }
        let cb = Codebook {
            n_entries: dims[0] as usize,
            dim: dims[1] as usize,
            entries,
        };
        cb.validate()?;
        Ok(cb)
    }

    pub fn save_ld_maps(&self, views: &[ViewSupervision]) -> Result<()> {
        let ld_dir = self.preproc_dir().join("ld");
        std::fs::create_dir_all(&ld_dir).map_err(|e| Error::io(&ld_dir, e))?;
        for (k, v) in views.iter().enumerate() {
            let m = v
                .ld_map
                .as_ref()
                .ok_or_else(|| Error::validation("ld map missing before save"))?;
            tensorio::write_tensor(
                &self.ld_path(k),
                &[v.height as u64, v.width as u64, m.d as u64],
                &m.data,
            )?;
        }
        Ok(())
    }

    pub fn attach_ld_maps(&self, views: &mut [ViewSupervision]) -> Result<()> {
        for (k, v) in views.iter_mut().enumerate() {
            let p = self.ld_path(k);
            if !p.exists() {
                return Err(Error::validation(format!(
                    "no LD map at {}; run 'gaff preprocess' first",
                    p.display()
                )));
            }
            let (dims, data) = tensorio::read_tensor(&p)?;
            if dims.len() != 3 || dims[0] as usize != v.height || dims[1] as usize != v.width {
                return Err(Error::format(&p, "LD map shape mismatch"));
            }
            v.ld_map = Some(LdMap {
                d: dims[2] as usize,
                data,
            });
        }
        Ok(())
    }

    pub fn write_meta(&self, n_c: usize, d: usize, k_min: usize, k_max: usize, seed: u64) -> Result<()> {
        let text = format!("n_c = {n_c}\nd = {d}\nk_min = {k_min}\nk_max = {k_max}\nseed = {seed}\n");
        tensorio::atomic_write(&self.meta_path(), text.as_bytes())
    }

    pub fn write_text(&self, path: &Path, text: &str) -> Result<()> {
        tensorio::atomic_write(path, text.as_bytes())
    }
}
