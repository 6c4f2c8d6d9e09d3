//! Annotation service: hands out sessions to annotators, records their gap
//! labels durably, reports progress and exports labeled sessions in the
//! corpus annotation format.

pub mod http;
pub mod store;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sessionseg::corpus::{read_catalog, read_session_log, Catalog};
use thiserror::Error;

use crate::http::AppState;
use crate::store::{AnnotationStore, Clock, StoreError};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] sessionseg::corpus::CorpusError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    pub sessions: PathBuf,
    pub catalog: Option<PathBuf>,
    pub log: PathBuf,
    pub ui_dir: Option<PathBuf>,
    pub seed: u64,
    pub reservation_timeout_secs: u64,
    /// Annotator id -> static token.
    pub annotators: HashMap<String, String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            sessions: "sessions.csv".into(),
            catalog: None,
            log: "labels.jsonl".into(),
            ui_dir: None,
            seed: 0,
            reservation_timeout_secs: 1800,
            annotators: HashMap::new(),
        }
    }
}

impl ServiceConfig {
    /// Reads a TOML config; relative paths are taken from the config's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: ServiceConfig = toml::from_str(&text).map_err(|e| ServiceError::Config(e.to_string()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut cfg.sessions);
        fix(&mut cfg.log);
        if let Some(p) = cfg.catalog.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.ui_dir.as_mut() {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn token_map(&self) -> Result<HashMap<String, String>, ServiceError> {
        if self.annotators.is_empty() {
            return Err(ServiceError::Config("no annotators configured".into()));
        }
        let mut tokens = HashMap::new();
        for (who, token) in &self.annotators {
            if token.is_empty() {
                return Err(ServiceError::Config(format!("empty token for `{who}`")));
            }
            if tokens.insert(token.clone(), who.clone()).is_some() {
                return Err(ServiceError::Config(format!("token of `{who}` is shared with another annotator")));
            }
        }
        Ok(tokens)
    }

    /// Loads the corpus, replays the record log and builds the shared state.
    pub fn build_state(&self, clock: Box<dyn Clock>) -> Result<Arc<AppState>, ServiceError> {
        let tokens = self.token_map()?;
        // single-item sessions have nothing to label
        let sessions: Vec<_> = read_session_log(&self.sessions)?.into_iter().filter(|s| s.len() >= 2).collect();
        let catalog = match &self.catalog {
            Some(p) => read_catalog(p)?.0,
            None => Catalog::default(),
        };
        let store = AnnotationStore::open(sessions, catalog, &self.log, self.seed, self.reservation_timeout_secs * 1000, clock)?;
        Ok(Arc::new(AppState { store: Mutex::new(store), tokens }))
    }
}
