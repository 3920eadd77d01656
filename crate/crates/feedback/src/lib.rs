//! Labels from people for the preference trainer.
//!
//! The trainer opens a session of segment pairs and blocks; annotators fetch
//! the pending pairs over HTTP and post left/right/equal choices. Every event
//! goes to an append-only journal, so a restarted service resumes the open
//! session with the labels it already had.

pub mod server;
pub mod store;

use std::time::Duration;

use rime_core::reward::{Label, Segment};
use rime_core::trainer::{HumanFeedback, Query};
use rime_core::{Error, Result};

pub use server::{router, spawn, ServerHandle};
pub use store::{EnvInfo, LabelAck, LabelSubmission, Progress, QueryBatch, QueryItem, Store, StoreError, Trajectory};

fn trajectory(seg: &Segment, positions: &[[f64; 2]]) -> Trajectory {
    Trajectory {
        states: seg.states.chunks_exact(seg.state_dim).map(<[f64]>::to_vec).collect(),
        actions: seg.actions.chunks_exact(seg.action_dim).map(<[f64]>::to_vec).collect(),
        positions: positions.to_vec(),
    }
}

/// Strips rewards from a trainer query.
pub fn query_item(q: &Query) -> QueryItem {
    QueryItem {
        id: q.id,
        seg0: trajectory(&q.seg0, &q.render0),
        seg1: trajectory(&q.seg1, &q.render1),
    }
}

/// Trainer-side end of the service: publishes a session and waits for it.
pub struct ServiceFeedback {
    pub store: Store,
    pub env: EnvInfo,
    /// Logged while waiting, so an idle run is visible.
    pub heartbeat: Duration,
}

impl ServiceFeedback {
    pub fn new(store: Store, env: EnvInfo) -> Self {
        Self {
            store,
            env,
            heartbeat: Duration::from_secs(60),
        }
    }
}

impl HumanFeedback for ServiceFeedback {
    fn collect(&mut self, session: u64, queries: &[Query], quota: usize) -> Result<Vec<(u64, Label)>> {
        let items = queries.iter().map(query_item).collect();
        self.store
            .open_session(session, quota, self.env.clone(), items)
            .map_err(|e| Error::Feedback(e.to_string()))?;
        log::info!("session {session}: waiting for {quota} labels");
        loop {
            match self.store.wait_complete(session, Some(self.heartbeat)) {
                Ok(Some(labels)) => return Ok(labels),
                Ok(None) => {
                    let p = self.store.progress();
                    log::info!("session {session}: {} of {} labels", p.labeled, p.quota);
                }
                Err(e) => return Err(Error::Feedback(e.to_string())),
            }
        }
    }
}
