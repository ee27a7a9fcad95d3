//! Switch: making a moved copy live.

use std::sync::atomic::Ordering::SeqCst;
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::{ack, BackgroundError, Pause};
use crate::node::{Key, NodeRef, PairId, ServerId, SH_KEY};
use crate::registry::{Entry, EntryUpdate};
use crate::transport::message::code;
use crate::transport::Message;
use crate::shard::Shard;

/// Give up re-aiming the left neighbour's subtail after this long. Routing
/// stays correct through the old subhead's forwarding address.
const PATCH_DEADLINE: Duration = Duration::from_secs(30);

impl Shard {
    pub(crate) fn switch(&self, entry: &Arc<Entry>, dest: ServerId, new_sh: NodeRef) -> Result<(), BackgroundError> {
        if entry.key_min() != SH_KEY {
            self.patch_left_subtail(entry.key_min(), new_sh);
        }
        self.registry.update_entry_fields(
            entry,
            EntryUpdate {
                subhead: Some(new_sh),
                subtail: Some(NodeRef::NULL),
                pair: Some(PairId::NONE),
                offset: Some(0),
                ..Default::default()
            },
        );
        self.arrivals.lock().remove(&entry.key_min());
        let msg = Message::SwitchServer { key_max: entry.key_max(), new_sh };
        self.broadcast(msg, &[dest], "switch server")?;
        self.expect_ack(dest, msg, "switch server")
    }

    /// Re-aims the subtail of the sublist ending at `key_min` at `new_sh`,
    /// following forwarding hints while that sublist is itself moving.
    fn patch_left_subtail(&self, key_min: Key, new_sh: NodeRef) {
        let deadline = Instant::now() + PATCH_DEADLINE;
        let mut pause = Pause::new();
        let mut hint: Option<ServerId> = None;
        loop {
            let target = match hint.take() {
                Some(s) => s,
                None => match self.registry.get_by_key(key_min) {
                    Some(e) => e.subhead().server(),
                    None => return,
                },
            };
            let msg = Message::SwitchSt { key_min, new_sh };
            let resp = if target == self.id() {
                self.switch_st_recv(key_min, new_sh).unwrap_or_else(Message::error)
            } else {
                self.net().request(target, msg).unwrap_or_else(|_| Message::error(code::UNAVAILABLE))
            };
            match resp {
                Message::Ack { ok: true, .. } => return,
                Message::RefResp { node } if node.is_real() => {
                    hint = Some(node.server());
                    if node.server() != target {
                        continue;
                    }
                }
                _ => {}
            }
            if Instant::now() > deadline || self.is_cancelled() {
                log::warn!("server {}: left subtail at {key_min} not re-aimed", self.id());
                return;
            }
            pause.wait();
        }
    }

    /// Handles SwitchST: re-aims the local subtail of the sublist ending at
    /// `key_min`. A reference reply names the subtail copy to retry at; a
    /// negative ack means re-resolve through the registry.
    pub(crate) fn switch_st_recv(&self, key_min: Key, new_sh: NodeRef) -> Result<Message, i64> {
        let staged = self.staged.lock().get(&key_min).cloned();
        if let Some(s) = staged {
            if !s.sealed.load(SeqCst) {
                return Ok(Message::RefResp { node: s.entry.subtail() });
            }
            return Ok(if self.switch_next_st(s.entry.subtail(), new_sh) { ack() } else { retry() });
        }
        let Some(e) = self.registry.get_by_key(key_min) else { return Err(code::UNKNOWN_RANGE) };
        if e.key_max() != key_min || !e.is_owned_by(self.id()) {
            return Ok(retry());
        }
        let st = e.subtail();
        if self.switch_next_st(st, new_sh) {
            return Ok(ack());
        }
        let loc = self.node(st).new_loc();
        Ok(if loc.is_real() { Message::RefResp { node: loc } } else { retry() })
    }

    /// Stores `new_sh` into a local subtail's link, counted as an update on
    /// its sublist. False if that sublist is frozen or was merged away.
    pub fn switch_next_st(&self, left_st: NodeRef, new_sh: NodeRef) -> bool {
        let (_, pair, st) = self.start_update(left_st);
        if st < 0 {
            pair.end.increment();
            return false;
        }
        let ok = loop {
            let w = self.arena.load_next(left_st);
            if w.is_marked() {
                break false;
            }
            if w == new_sh || self.arena.link_cas(left_st, w, new_sh) {
                break true;
            }
        };
        pair.end.increment();
        ok
    }

    /// Handles SwitchServer. On the destination it attaches the staged
    /// copy; elsewhere it re-points the routing entry.
    pub(crate) fn switch_server_recv(&self, key_max: Key, new_sh: NodeRef) -> Result<Message, i64> {
        let e = self.registry.get_by_key(key_max).ok_or(code::UNKNOWN_RANGE)?;
        if e.key_max() != key_max {
            return Err(code::UNKNOWN_RANGE);
        }
        let staged = {
            let mut staged = self.staged.lock();
            match staged.get(&key_max) {
                Some(s) if s.entry.subhead() == new_sh => staged.remove(&key_max),
                _ => None,
            }
        };
        match staged {
            Some(s) => {
                let c = &s.entry;
                self.registry.update_entry_fields(
                    &e,
                    EntryUpdate { subtail: Some(c.subtail()), pair: Some(c.pair()), offset: Some(c.offset()), ..Default::default() },
                );
                self.registry.update_entry_fields(&e, EntryUpdate { subhead: Some(new_sh), ..Default::default() });
                // replayed items were not counted on the way in
                self.arena.pair(c.pair()).size.store(self.count_between(new_sh, c.subtail()), SeqCst);
                self.note_arrival(e.key_min());
            }
            None if self.is_local(new_sh) && e.subhead() == new_sh => {}
            None => self.registry.update_entry_fields(&e, EntryUpdate { subhead: Some(new_sh), ..Default::default() }),
        }
        Ok(ack())
    }
}

fn retry() -> Message {
    Message::Ack { ok: false, value: code::UNKNOWN_RANGE }
}
