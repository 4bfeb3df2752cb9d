//! Aggregator side of a run: broadcast, collect, aggregate, account.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use fedfreeze_core::client::{evaluate, EVAL_CHUNK};
use fedfreeze_core::codec::{decode_partial_update, serialize_model};
use fedfreeze_core::metrics::{ClientMetrics, MetricsRecord, SelectionHistogram};
use fedfreeze_core::{Dataset, GlobalState, Model, PartialUpdate, RoundPlan};

use crate::transport::{Direction, Event, Message, MessageKind, ServerLink, TrafficLedger, SERVER_ID};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct ServerSettings {
    pub smoothing: bool,
    pub quorum: usize,
    pub round_timeout: Duration,
}

pub struct Server<L> {
    pub link: L,
    pub state: GlobalState<f32>,
    pub ledger: TrafficLedger,
    pub histogram: SelectionHistogram,
    pub settings: ServerSettings,
}

impl<L: ServerLink> Server<L> {
    pub fn new(link: L, initial: Model<f32>, layer_budget: usize, settings: ServerSettings) -> Self {
        let histogram = SelectionHistogram::new(link.clients(), initial.num_units(), layer_budget);
        Self { link, state: GlobalState::new(initial), ledger: TrafficLedger::new(), histogram, settings }
    }

    /// Ledger rows are keyed by the round in which a message travels; session
    /// control outside any round goes to round 0.
    fn send_in(&mut self, round: u32, client: u32, msg: &Message) -> Result<()> {
        self.link.send(client, msg)?;
        self.ledger.record(round, client, Direction::Downlink, msg);
        Ok(())
    }

    /// Runs one round: full model down to every sampled client, partial
    /// updates back, aggregation once the replies are in. A round with fewer
    /// than the quorum of updates fails.
    pub fn run_round(&mut self, plan: &RoundPlan, test: &Dataset) -> Result<MetricsRecord> {
        let started = Instant::now();
        let round = plan.round;
        if round != self.state.round + 1 {
            return Err(Error::Core(fedfreeze_core::Error::RoundMismatch { expected: self.state.round + 1, got: round }));
        }
        let model = Message::new(MessageKind::GlobalModel, round, SERVER_ID, serialize_model(&self.state.model));
        let mut pending: BTreeSet<u32> = BTreeSet::new();
        for &c in &plan.clients {
            let sent = self
                .send_in(round, c, &Message::control(MessageKind::RoundStart, round, SERVER_ID))
                .and_then(|_| self.send_in(round, c, &model));
            match sent {
                Ok(()) => {
                    pending.insert(c);
                }
                Err(e) => log::warn!("round {}: client {} unreachable: {}", round, c, e),
            }
        }

        let deadline = started + self.settings.round_timeout;
        let mut updates: BTreeMap<u32, PartialUpdate<f32>> = BTreeMap::new();
        while !pending.is_empty() {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                log::warn!("round {}: timed out waiting for clients {:?}", round, pending);
                break;
            }
            let msg = match self.link.recv_timeout(left)? {
                None => continue,
                Some(Event::Disconnected(c)) => {
                    if pending.remove(&c) {
                        log::warn!("round {}: client {} disconnected", round, c);
                    }
                    continue;
                }
                Some(Event::Message(m)) => m,
            };
            self.ledger.record(round, msg.sender, Direction::Uplink, &msg);
            if msg.round != round || !pending.contains(&msg.sender) {
                log::warn!("round {}: dropping {:?} from client {} for round {}", round, msg.kind, msg.sender, msg.round);
                continue;
            }
            match msg.kind {
                MessageKind::PartialUpdate => {
                    let update = match decode_partial_update(&self.state.model, &msg.payload) {
                        Ok(u) if u.client_id == msg.sender && u.round == round => u,
                        Ok(_) => {
                            log::warn!("round {}: client {} sent an update labelled for someone else", round, msg.sender);
                            pending.remove(&msg.sender);
                            continue;
                        }
                        Err(e) => {
                            log::warn!("round {}: undecodable update from client {}: {}", round, msg.sender, e);
                            pending.remove(&msg.sender);
                            continue;
                        }
                    };
                    pending.remove(&msg.sender);
                    updates.insert(msg.sender, update);
                }
                MessageKind::Error => {
                    log::warn!("round {}: client {} failed: {}", round, msg.sender, msg.text());
                    pending.remove(&msg.sender);
                }
                other => log::warn!("round {}: unexpected {:?} from client {}", round, other, msg.sender),
            }
        }

        if updates.len() < self.settings.quorum {
            return Err(Error::Quorum {
                round,
                received: updates.len(),
                sampled: plan.clients.len(),
                quorum: self.settings.quorum,
            });
        }
        let updates: Vec<PartialUpdate<f32>> = updates.into_values().collect();
        self.state.advance(&updates, self.settings.smoothing)?;
        let mut selection_counts = vec![0u64; self.state.model.num_units()];
        for u in &updates {
            self.histogram.record(u.client_id as usize, &u.trained)?;
            for unit in u.trained.iter() {
                selection_counts[unit] += 1;
            }
        }
        for u in &updates {
            if let Err(e) = self.send_in(round, u.client_id, &Message::control(MessageKind::RoundAck, round, SERVER_ID)) {
                log::warn!("round {}: ack to client {} failed: {}", round, u.client_id, e);
            }
        }

        let eval = evaluate(&self.state.model, test, EVAL_CHUNK)?;
        let up = self.ledger.round_total(round, Direction::Uplink);
        let down = self.ledger.round_total(round, Direction::Downlink);
        Ok(MetricsRecord {
            round,
            accuracy: eval.accuracy,
            loss: eval.loss,
            clients: updates
                .iter()
                .map(|u| ClientMetrics {
                    client: u.client_id,
                    samples: u.sample_count,
                    loss: u.loss,
                    accuracy: u.accuracy,
                    trained_units: u.trained.to_vec(),
                })
                .collect(),
            uplink_bytes: up.bytes,
            downlink_bytes: down.bytes,
            uplink_header_bytes: up.header_bytes,
            downlink_header_bytes: down.header_bytes,
            selection_counts,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Tells every client the run is over.
    pub fn shutdown(&mut self) {
        let round = self.state.round;
        for c in 0..self.link.clients() as u32 {
            if let Err(e) = self.send_in(0, c, &Message::control(MessageKind::Shutdown, round, SERVER_ID)) {
                log::debug!("shutdown to client {}: {}", c, e);
            }
        }
    }
}
