use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::{Mutex, MutexGuard};

use caire_core::corpus::Turn;
use caire_core::generator::dialogue_history;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnFlags {
    pub reported: bool,
    pub edited: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionTurn {
    pub turn_id: usize,
    pub user_text: String,
    pub bot_text: String,
    pub emotion_label: String,
    /// Exactly what the model saw when producing `bot_text`.
    pub history: Vec<Turn>,
    pub flags: TurnFlags,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revised: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub persona: Vec<String>,
    pub turns: Vec<SessionTurn>,
}

impl Session {
    pub fn new(session_id: String, persona: Vec<String>) -> Self {
        Self {
            session_id,
            persona,
            turns: Vec::new(),
        }
    }

    /// Model history for the next user `message`, derived only from this
    /// session's own turns.
    pub fn history_for(&self, message: &str, window: usize) -> Vec<Turn> {
        let exchanges: Vec<(String, String)> = self
            .turns
            .iter()
            .map(|t| (t.user_text.clone(), t.bot_text.clone()))
            .collect();
        dialogue_history(&exchanges, message, window)
    }

    pub fn push_turn(
        &mut self,
        user_text: String,
        bot_text: String,
        emotion_label: String,
        history: Vec<Turn>,
    ) -> usize {
        let turn_id = self.turns.len();
        self.turns.push(SessionTurn {
            turn_id,
            user_text,
            bot_text,
            emotion_label,
            history,
            flags: TurnFlags::default(),
            revised: None,
        });
        turn_id
    }
}

/// In-memory sessions keyed by id.
pub struct SessionStore {
    sessions: Mutex<HashMap<String, Session>>,
}

impl Default for SessionStore {
    fn default() -> Self {
        Self::new()
    }
}

impl SessionStore {
    pub fn new() -> Self {
        Self {
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn lock(&self) -> MutexGuard<'_, HashMap<String, Session>> {
        self.sessions.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Returns the existing session or opens a fresh one under a new id.
    pub fn get_or_create(&self, id: Option<&str>, persona: &[String]) -> Session {
        let mut map = self.lock();
        if let Some(s) = id.and_then(|id| map.get(id)) {
            return s.clone();
        }
        let session = Session::new(uuid::Uuid::new_v4().to_string(), persona.to_vec());
        map.insert(session.session_id.clone(), session.clone());
        session
    }

    pub fn save_snapshot(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let map = self.lock();
        let mut all: Vec<&Session> = map.values().collect();
        all.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        fs::write(path, serde_json::to_vec_pretty(&all)?)
    }

    pub fn load_snapshot(path: impl AsRef<Path>) -> io::Result<Self> {
        let sessions: Vec<Session> = serde_json::from_slice(&fs::read(path)?)?;
        Ok(Self {
            sessions: Mutex::new(
                sessions
                    .into_iter()
                    .map(|s| (s.session_id.clone(), s))
                    .collect(),
            ),
        })
    }
}
