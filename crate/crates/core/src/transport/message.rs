//! Message schema and the fixed-width little-endian frame codec.
//!
//! Frame layout: `[u32 len][u8 tag][u64 request_id][payload]`, where `len`
//! counts every byte after the length field.

use thiserror::Error;

use crate::node::{Key, NodeRef, ServerId, Timestamp};

pub const FIND: u8 = 1;
pub const INSERT: u8 = 2;
pub const REMOVE: u8 = 3;
pub const DELETE_AT: u8 = 4;
pub const MOVE_SH: u8 = 5;
pub const MOVE_ITEM: u8 = 6;
pub const REP_INSERT: u8 = 7;
pub const REP_DELETE: u8 = 8;
pub const REPLAY_RESP_INSERT: u8 = 9;
pub const REPLAY_RESP_DELETE: u8 = 10;
pub const REGISTER_SUBLIST: u8 = 11;
pub const SWITCH_ST: u8 = 12;
pub const SWITCH_SERVER: u8 = 13;
pub const REGISTER_MERGED: u8 = 14;
pub const ACK: u8 = 15;
pub const BOOL_RESP: u8 = 16;
pub const REF_RESP: u8 = 17;

/// Error codes carried in a negative [`Message::Ack`].
pub mod code {
    pub const HOP_LIMIT: i64 = 1;
    pub const EXHAUSTED: i64 = 2;
    pub const UNKNOWN_RANGE: i64 = 3;
    pub const BAD_REQUEST: i64 = 4;
    pub const UNAVAILABLE: i64 = 5;
    /// The replicate's predecessor has not materialized yet; redeliver later.
    pub const NOT_READY: i64 = 6;
}

/// Client operation kinds that can be delegated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Find,
    Insert,
    Remove,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Message {
    /// Delegated client operation. `subhead` may be NULL (resolve locally).
    Client { kind: OpKind, key: Key, subhead: NodeRef, hops: u8 },
    /// Remove the given node copy on its owning server.
    DeleteAt { node: NodeRef, key: Key, hops: u8 },
    MoveSh { sid: ServerId, ts: Timestamp, key_min: Key, key_max: Key },
    MoveItem { prev: NodeRef, key: Key, marked: bool, st_next: NodeRef, sid: ServerId, ts: Timestamp },
    RepInsert { prev_loc: NodeRef, old_loc: NodeRef, key: Key, prev_sid: ServerId, prev_ts: Timestamp, sid: ServerId, ts: Timestamp },
    RepDelete { prev_loc: NodeRef, old_loc: NodeRef, key: Key, sid: ServerId, ts: Timestamp },
    ReplayRespInsert { old_loc: NodeRef, new_loc: NodeRef },
    ReplayRespDelete { old_loc: NodeRef },
    RegisterSublist { key_min: Key, subhead: NodeRef },
    SwitchSt { key_min: Key, new_sh: NodeRef },
    SwitchServer { key_max: Key, new_sh: NodeRef },
    RegisterMerged { key_mid: Key },
    /// Generic acknowledgement; also used as the load-gossip request and
    /// as the error response (`ok == false`, `value` = error code).
    Ack { ok: bool, value: i64 },
    BoolResp { value: bool, hops: u8 },
    RefResp { node: NodeRef },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("frame shorter than its header or declared length")]
    Truncated,
    #[error("unknown message tag {0}")]
    BadTag(u8),
    #[error("payload length {got} does not match tag {tag} (expected {expected})")]
    BadLength { tag: u8, got: usize, expected: usize },
    #[error("invalid field value")]
    BadField,
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::Client { kind: OpKind::Find, .. } => FIND,
            Message::Client { kind: OpKind::Insert, .. } => INSERT,
            Message::Client { kind: OpKind::Remove, .. } => REMOVE,
            Message::DeleteAt { .. } => DELETE_AT,
            Message::MoveSh { .. } => MOVE_SH,
            Message::MoveItem { .. } => MOVE_ITEM,
            Message::RepInsert { .. } => REP_INSERT,
            Message::RepDelete { .. } => REP_DELETE,
            Message::ReplayRespInsert { .. } => REPLAY_RESP_INSERT,
            Message::ReplayRespDelete { .. } => REPLAY_RESP_DELETE,
            Message::RegisterSublist { .. } => REGISTER_SUBLIST,
            Message::SwitchSt { .. } => SWITCH_ST,
            Message::SwitchServer { .. } => SWITCH_SERVER,
            Message::RegisterMerged { .. } => REGISTER_MERGED,
            Message::Ack { .. } => ACK,
            Message::BoolResp { .. } => BOOL_RESP,
            Message::RefResp { .. } => REF_RESP,
        }
    }

    pub fn error(code: i64) -> Message {
        Message::Ack { ok: false, value: code }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        let mut w = Writer(out);
        match *self {
            Message::Client { key, subhead, hops, .. } => {
                w.i64(key);
                w.r(subhead);
                w.u8(hops);
            }
            Message::DeleteAt { node, key, hops } => {
                w.r(node);
                w.i64(key);
                w.u8(hops);
            }
            Message::MoveSh { sid, ts, key_min, key_max } => {
                w.u16(sid);
                w.u64(ts);
                w.i64(key_min);
                w.i64(key_max);
            }
            Message::MoveItem { prev, key, marked, st_next, sid, ts } => {
                w.r(prev);
                w.i64(key);
                w.u8(marked as u8);
                w.r(st_next);
                w.u16(sid);
                w.u64(ts);
            }
            Message::RepInsert { prev_loc, old_loc, key, prev_sid, prev_ts, sid, ts } => {
                w.r(prev_loc);
                w.r(old_loc);
                w.i64(key);
                w.u16(prev_sid);
                w.u64(prev_ts);
                w.u16(sid);
                w.u64(ts);
            }
            Message::RepDelete { prev_loc, old_loc, key, sid, ts } => {
                w.r(prev_loc);
                w.r(old_loc);
                w.i64(key);
                w.u16(sid);
                w.u64(ts);
            }
            Message::ReplayRespInsert { old_loc, new_loc } => {
                w.r(old_loc);
                w.r(new_loc);
            }
            Message::ReplayRespDelete { old_loc } => w.r(old_loc),
            Message::RegisterSublist { key_min, subhead } => {
                w.i64(key_min);
                w.r(subhead);
            }
            Message::SwitchSt { key_min, new_sh } => {
                w.i64(key_min);
                w.r(new_sh);
            }
            Message::SwitchServer { key_max, new_sh } => {
                w.i64(key_max);
                w.r(new_sh);
            }
            Message::RegisterMerged { key_mid } => w.i64(key_mid),
            Message::Ack { ok, value } => {
                w.u8(ok as u8);
                w.i64(value);
            }
            Message::BoolResp { value, hops } => {
                w.u8(value as u8);
                w.u8(hops);
            }
            Message::RefResp { node } => w.r(node),
        }
    }

    /// Encodes a complete frame.
    pub fn encode(&self, request_id: u64) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        out.extend_from_slice(&[0; 4]);
        out.push(self.tag());
        out.extend_from_slice(&request_id.to_le_bytes());
        self.write_payload(&mut out);
        let len = (out.len() - 4) as u32;
        out[..4].copy_from_slice(&len.to_le_bytes());
        out
    }

    /// Decodes one complete frame (length prefix included).
    pub fn decode(frame: &[u8]) -> Result<(u64, Message), DecodeError> {
        if frame.len() < 4 {
            return Err(DecodeError::Truncated);
        }
        let len = u32::from_le_bytes(frame[..4].try_into().unwrap()) as usize;
        if frame.len() - 4 != len {
            return Err(DecodeError::Truncated);
        }
        Message::decode_body(&frame[4..])
    }

    /// Decodes the bytes that follow the length prefix.
    pub fn decode_body(body: &[u8]) -> Result<(u64, Message), DecodeError> {
        if body.len() < 9 {
            return Err(DecodeError::Truncated);
        }
        let tag = body[0];
        let id = u64::from_le_bytes(body[1..9].try_into().unwrap());
        let payload = &body[9..];
        let expected = payload_len(tag).ok_or(DecodeError::BadTag(tag))?;
        if payload.len() != expected {
            return Err(DecodeError::BadLength { tag, got: payload.len(), expected });
        }
        let mut r = Reader(payload);
        let client = |kind, r: &mut Reader| Message::Client { kind, key: r.i64(), subhead: r.r(), hops: r.u8() };
        let msg = match tag {
            FIND => client(OpKind::Find, &mut r),
            INSERT => client(OpKind::Insert, &mut r),
            REMOVE => client(OpKind::Remove, &mut r),
            DELETE_AT => Message::DeleteAt { node: r.r(), key: r.i64(), hops: r.u8() },
            MOVE_SH => Message::MoveSh { sid: r.u16(), ts: r.u64(), key_min: r.i64(), key_max: r.i64() },
            MOVE_ITEM => Message::MoveItem {
                prev: r.r(),
                key: r.i64(),
                marked: r.flag()?,
                st_next: r.r(),
                sid: r.u16(),
                ts: r.u64(),
            },
            REP_INSERT => Message::RepInsert {
                prev_loc: r.r(),
                old_loc: r.r(),
                key: r.i64(),
                prev_sid: r.u16(),
                prev_ts: r.u64(),
                sid: r.u16(),
                ts: r.u64(),
            },
            REP_DELETE => Message::RepDelete { prev_loc: r.r(), old_loc: r.r(), key: r.i64(), sid: r.u16(), ts: r.u64() },
            REPLAY_RESP_INSERT => Message::ReplayRespInsert { old_loc: r.r(), new_loc: r.r() },
            REPLAY_RESP_DELETE => Message::ReplayRespDelete { old_loc: r.r() },
            REGISTER_SUBLIST => Message::RegisterSublist { key_min: r.i64(), subhead: r.r() },
            SWITCH_ST => Message::SwitchSt { key_min: r.i64(), new_sh: r.r() },
            SWITCH_SERVER => Message::SwitchServer { key_max: r.i64(), new_sh: r.r() },
            REGISTER_MERGED => Message::RegisterMerged { key_mid: r.i64() },
            ACK => Message::Ack { ok: r.flag()?, value: r.i64() },
            BOOL_RESP => Message::BoolResp { value: r.flag()?, hops: r.u8() },
            REF_RESP => Message::RefResp { node: r.r() },
            _ => return Err(DecodeError::BadTag(tag)),
        };
        Ok((id, msg))
    }
}

/// Payload width in bytes for each tag.
/// Upper bound on the body length of any valid frame.
pub const MAX_FRAME: usize = 256;

pub fn payload_len(tag: u8) -> Option<usize> {
    Some(match tag {
        FIND | INSERT | REMOVE | DELETE_AT => 17,
        MOVE_SH => 26,
        MOVE_ITEM => 35,
        REP_INSERT => 44,
        REP_DELETE => 34,
        REPLAY_RESP_INSERT => 16,
        REPLAY_RESP_DELETE => 8,
        REGISTER_SUBLIST | SWITCH_ST | SWITCH_SERVER => 16,
        REGISTER_MERGED => 8,
        ACK => 9,
        BOOL_RESP => 2,
        REF_RESP => 8,
        _ => return None,
    })
}

struct Writer<'a>(&'a mut Vec<u8>);

impl Writer<'_> {
    fn u8(&mut self, v: u8) {
        self.0.push(v)
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes())
    }
    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes())
    }
    fn r(&mut self, v: NodeRef) {
        self.u64(v.raw())
    }
}

/// Reads fixed-width fields; lengths are validated up front.
struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let (head, rest) = self.0.split_at(N);
        self.0 = rest;
        head.try_into().unwrap()
    }
    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }
    fn flag(&mut self) -> Result<bool, DecodeError> {
        match self.u8() {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(DecodeError::BadField),
        }
    }
    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
    fn i64(&mut self) -> i64 {
        i64::from_le_bytes(self.take())
    }
    fn r(&mut self) -> NodeRef {
        NodeRef::from_raw(self.u64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn find_frame_layout() {
        let m = Message::Client { kind: OpKind::Find, key: 7, subhead: NodeRef::NULL, hops: 1 };
        let f = m.encode(0x0102);
        assert_eq!(f.len(), 4 + 1 + 8 + 17);
        assert_eq!(u32::from_le_bytes(f[..4].try_into().unwrap()) as usize, f.len() - 4);
        assert_eq!(f[4], FIND);
        assert_eq!(u64::from_le_bytes(f[5..13].try_into().unwrap()), 0x0102);
        assert_eq!(i64::from_le_bytes(f[13..21].try_into().unwrap()), 7);
        assert_eq!(Message::decode(&f).unwrap(), (0x0102, m));
    }

    #[test]
    fn every_tag_has_its_declared_width() {
        let r = NodeRef::pack(2, 9, true);
        let all = [
            Message::Client { kind: OpKind::Insert, key: -3, subhead: r, hops: 2 },
            Message::Client { kind: OpKind::Remove, key: 3, subhead: r, hops: 3 },
            Message::DeleteAt { node: r, key: 1, hops: 1 },
            Message::MoveSh { sid: 1, ts: 2, key_min: 3, key_max: 4 },
            Message::MoveItem { prev: r, key: 5, marked: true, st_next: r, sid: 6, ts: 7 },
            Message::RepInsert { prev_loc: r, old_loc: r, key: 1, prev_sid: 2, prev_ts: 3, sid: 4, ts: 5 },
            Message::RepDelete { prev_loc: r, old_loc: r, key: 1, sid: 2, ts: 3 },
            Message::ReplayRespInsert { old_loc: r, new_loc: r },
            Message::ReplayRespDelete { old_loc: r },
            Message::RegisterSublist { key_min: 1, subhead: r },
            Message::SwitchSt { key_min: 1, new_sh: r },
            Message::SwitchServer { key_max: 1, new_sh: r },
            Message::RegisterMerged { key_mid: 1 },
            Message::Ack { ok: true, value: -1 },
            Message::BoolResp { value: true, hops: 2 },
            Message::RefResp { node: r },
        ];
        for m in all {
            let f = m.encode(99);
            assert_eq!(f.len(), 13 + payload_len(m.tag()).unwrap(), "{m:?}");
            assert_eq!(Message::decode(&f).unwrap(), (99, m));
        }
    }

    #[test]
    fn malformed_frames_are_rejected() {
        let f = Message::RegisterMerged { key_mid: 4 }.encode(1);
        for cut in 0..f.len() {
            assert!(Message::decode(&f[..cut]).is_err());
        }
        let mut bad = f.clone();
        bad[4] = 200;
        assert_eq!(Message::decode(&bad), Err(DecodeError::BadTag(200)));
        let mut flag = Message::Ack { ok: true, value: 0 }.encode(1);
        flag[13] = 7;
        assert_eq!(Message::decode(&flag), Err(DecodeError::BadField));
    }

    fn any_ref() -> impl Strategy<Value = NodeRef> {
        any::<u64>().prop_map(NodeRef::from_raw)
    }

    fn any_message() -> impl Strategy<Value = Message> {
        let kind = prop_oneof![Just(OpKind::Find), Just(OpKind::Insert), Just(OpKind::Remove)];
        prop_oneof![
            (kind, any::<i64>(), any_ref(), any::<u8>())
                .prop_map(|(kind, key, subhead, hops)| Message::Client { kind, key, subhead, hops }),
            (any_ref(), any::<i64>(), any::<u8>()).prop_map(|(node, key, hops)| Message::DeleteAt { node, key, hops }),
            (any::<u16>(), any::<u64>(), any::<i64>(), any::<i64>())
                .prop_map(|(sid, ts, key_min, key_max)| Message::MoveSh { sid, ts, key_min, key_max }),
            (any_ref(), any::<i64>(), any::<bool>(), any_ref(), any::<u16>(), any::<u64>()).prop_map(
                |(prev, key, marked, st_next, sid, ts)| Message::MoveItem { prev, key, marked, st_next, sid, ts }
            ),
            (any_ref(), any_ref(), any::<i64>(), any::<u16>(), any::<u64>(), any::<u16>(), any::<u64>()).prop_map(
                |(prev_loc, old_loc, key, prev_sid, prev_ts, sid, ts)| Message::RepInsert {
                    prev_loc,
                    old_loc,
                    key,
                    prev_sid,
                    prev_ts,
                    sid,
                    ts
                }
            ),
            (any_ref(), any_ref(), any::<i64>(), any::<u16>(), any::<u64>())
                .prop_map(|(prev_loc, old_loc, key, sid, ts)| Message::RepDelete { prev_loc, old_loc, key, sid, ts }),
            (any_ref(), any_ref()).prop_map(|(old_loc, new_loc)| Message::ReplayRespInsert { old_loc, new_loc }),
            any_ref().prop_map(|old_loc| Message::ReplayRespDelete { old_loc }),
            (any::<i64>(), any_ref()).prop_map(|(key_min, subhead)| Message::RegisterSublist { key_min, subhead }),
            (any::<i64>(), any_ref()).prop_map(|(key_min, new_sh)| Message::SwitchSt { key_min, new_sh }),
            (any::<i64>(), any_ref()).prop_map(|(key_max, new_sh)| Message::SwitchServer { key_max, new_sh }),
            any::<i64>().prop_map(|key_mid| Message::RegisterMerged { key_mid }),
            (any::<bool>(), any::<i64>()).prop_map(|(ok, value)| Message::Ack { ok, value }),
            (any::<bool>(), any::<u8>()).prop_map(|(value, hops)| Message::BoolResp { value, hops }),
            any_ref().prop_map(|node| Message::RefResp { node }),
        ]
    }

    proptest! {
        #[test]
        fn round_trip(m in any_message(), id in any::<u64>()) {
            prop_assert_eq!(Message::decode(&m.encode(id)).unwrap(), (id, m));
        }

        #[test]
        fn garbage_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = Message::decode(&bytes);
            let _ = Message::decode_body(&bytes);
        }
    }
}
