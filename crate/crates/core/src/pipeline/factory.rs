use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{BackendFactory, Role};
use crate::backend::{Backend, BackendError, BackendProfile, HttpBackend, MockBackend, MockScript};
use crate::ingest::ReplayClock;
use crate::prompts::OptionLetter;

/// A backend as written in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Mock {
        profile: BackendProfile,
        #[serde(default)]
        script: MockScript,
    },
    Http {
        profile: BackendProfile,
    },
}

impl BackendSpec {
    pub fn profile(&self) -> &BackendProfile {
        match self {
            Self::Mock { profile, .. } | Self::Http { profile } => profile,
        }
    }

    pub fn is_mock(&self) -> bool {
        matches!(self, Self::Mock { .. })
    }

    /// Mock scripts get `seed` added to their own, so runs with different
    /// seeds differ and runs with equal seeds match.
    pub fn build(
        &self,
        seed: u64,
        clock: &ReplayClock,
        answer_key: &BTreeMap<String, OptionLetter>,
    ) -> Result<Arc<dyn Backend>, BackendError> {
        match self {
            Self::Mock { profile, script } => {
                profile.validate()?;
                let mut script = script.clone();
                script.seed = script.seed.wrapping_add(seed);
                let mock = MockBackend::new(profile.clone(), script, clock.clone()).with_answer_key(answer_key.clone());
                Ok(Arc::new(mock))
            }
            Self::Http { profile } => Ok(Arc::new(HttpBackend::new(profile.clone(), clock.clone())?)),
        }
    }
}

/// Builds the descriptor and reasoner from two specs.
#[derive(Debug, Clone)]
pub struct SpecFactory {
    pub descriptor: BackendSpec,
    pub reasoner: BackendSpec,
    pub answer_key: BTreeMap<String, OptionLetter>,
}

impl SpecFactory {
    pub fn new(descriptor: BackendSpec, reasoner: BackendSpec) -> Self {
        Self { descriptor, reasoner, answer_key: BTreeMap::new() }
    }

    pub fn with_answer_key(mut self, key: BTreeMap<String, OptionLetter>) -> Self {
        self.answer_key = key;
        self
    }
}

impl BackendFactory for SpecFactory {
    fn build(&self, role: Role, seed: u64, clock: &ReplayClock) -> Result<Arc<dyn Backend>, BackendError> {
        let spec = match role {
            Role::Descriptor => &self.descriptor,
            Role::Reasoner => &self.reasoner,
        };
        spec.build(seed, clock, &self.answer_key)
    }
}
