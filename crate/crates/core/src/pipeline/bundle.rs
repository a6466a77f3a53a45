//! Model bundle: a directory holding the config snapshot and the three
//! trained models.

use std::fs;
use std::path::Path;

use crate::backend::BackendModel;
use crate::gmm::GmmModel;
use crate::ivector::{IvectorExtractor, TvMatrix};

use super::{PipelineConfig, PipelineError, Stage};

pub const CONFIG_FILE: &str = "config.toml";
pub const UBM_FILE: &str = "ubm.bin";
pub const TV_FILE: &str = "tv.bin";
pub const BACKEND_FILE: &str = "backend.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: PipelineConfig,
    pub ubm: GmmModel,
    pub tv: TvMatrix,
    pub backend: BackendModel,
}

impl ModelBundle {
    pub fn labels(&self) -> &[String] {
        self.backend.labels()
    }

    pub fn extractor(&self) -> Result<IvectorExtractor<'_>, PipelineError> {
        IvectorExtractor::new(&self.tv, &self.ubm).map_err(PipelineError::at(Stage::Bundle))
    }

    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        let err = PipelineError::at(Stage::Bundle);
        fs::create_dir_all(dir).map_err(err)?;
        let toml = self.config.to_toml().map_err(PipelineError::at(Stage::Bundle))?;
        fs::write(dir.join(CONFIG_FILE), toml).map_err(PipelineError::at(Stage::Bundle))?;
        fs::write(dir.join(UBM_FILE), self.ubm.to_bytes()).map_err(PipelineError::at(Stage::Bundle))?;
        fs::write(dir.join(TV_FILE), self.tv.to_bytes()).map_err(PipelineError::at(Stage::Bundle))?;
        fs::write(dir.join(BACKEND_FILE), self.backend.to_bytes()).map_err(PipelineError::at(Stage::Bundle))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let read = |name: &str| {
            fs::read(dir.join(name)).map_err(|e| PipelineError::new(Stage::Bundle, format!("{name}: {e}")))
        };
        let text = String::from_utf8(read(CONFIG_FILE)?)
            .map_err(|e| PipelineError::new(Stage::Bundle, format!("{CONFIG_FILE}: {e}")))?;
        let config = PipelineConfig::from_toml(&text).map_err(PipelineError::at(Stage::Bundle))?;
        let ubm = GmmModel::from_bytes(&read(UBM_FILE)?).map_err(PipelineError::at(Stage::Bundle))?;
        let tv = TvMatrix::from_bytes(&read(TV_FILE)?).map_err(PipelineError::at(Stage::Bundle))?;
        let backend = BackendModel::from_bytes(&read(BACKEND_FILE)?).map_err(PipelineError::at(Stage::Bundle))?;
        if tv.ubm_checksum() != &ubm.checksum() {
            return Err(PipelineError::new(
                Stage::Bundle,
                "TV matrix was trained against a different UBM",
            ));
        }
        if backend.dim() != tv.rank() {
            return Err(PipelineError::new(
                Stage::Bundle,
                format!("backend expects {}-dim iVectors, TV rank is {}", backend.dim(), tv.rank()),
            ));
        }
        Ok(Self {
            config,
            ubm,
            tv,
            backend,
        })
    }
}
