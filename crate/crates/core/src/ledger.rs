//! Append-only, hash-chained, signed event log recording registrations,
//! pool membership, contributions and slashes.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::crypto::{sha256_chain, Address, Digest, Keypair, SignatureBytes};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    Register,
    InviteAccept,
    Contribution,
    Slash,
}

impl EventKind {
    pub const ALL: [EventKind; 4] = [EventKind::Register, EventKind::InviteAccept, EventKind::Contribution, EventKind::Slash];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Register => "register",
            EventKind::InviteAccept => "invite_accept",
            EventKind::Contribution => "contribution",
            EventKind::Slash => "slash",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    fn code(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEvent {
    pub seq: u64,
    pub kind: EventKind,
    /// Free-form `key=value` text describing the event.
    pub payload: String,
    pub signer: Address,
    pub signature: SignatureBytes,
    pub prev_hash: Digest,
    pub this_hash: Digest,
}

/// `seq (u64 LE) ‖ kind (u8) ‖ signer (32 bytes) ‖ len(payload) (u64 LE) ‖ payload`.
pub fn canonical_bytes(seq: u64, kind: EventKind, signer: &Address, payload: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(49 + payload.len());
    out.extend_from_slice(&seq.to_le_bytes());
    out.push(kind.code());
    out.extend_from_slice(&signer.0);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload.as_bytes());
    out
}

impl LedgerEvent {
    pub fn expected_hash(&self) -> Digest {
        sha256_chain(&self.prev_hash, &canonical_bytes(self.seq, self.kind, &self.signer, &self.payload))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ledger {
    events: Vec<LedgerEvent>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_events(events: Vec<LedgerEvent>) -> Self {
        Self { events }
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn head(&self) -> Digest {
        self.events.last().map_or([0; 32], |e| e.this_hash)
    }

    pub fn append(&mut self, kind: EventKind, payload: impl Into<String>, key: &Keypair) -> &LedgerEvent {
        let payload = payload.into();
        let seq = self.events.len() as u64;
        let signer = key.address();
        let prev_hash = self.head();
        let this_hash = sha256_chain(&prev_hash, &canonical_bytes(seq, kind, &signer, &payload));
        let signature = key.sign(&this_hash);
        self.events.push(LedgerEvent { seq, kind, payload, signer, signature, prev_hash, this_hash });
        self.events.last().unwrap()
    }

    pub fn verify(&self) -> Result<(), usize> {
        verify(&self.events)
    }
}

/// Replays the chain; returns the index of the first event whose sequence
/// number, back-link, hash or signature is wrong.
pub fn verify(events: &[LedgerEvent]) -> Result<(), usize> {
    let mut prev = [0u8; 32];
    for (i, e) in events.iter().enumerate() {
        let ok = e.seq == i as u64
            && e.prev_hash == prev
            && e.expected_hash() == e.this_hash
            && e.signer.verify(&e.this_hash, &e.signature).is_ok();
        if !ok {
            return Err(i);
        }
        prev = e.this_hash;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use proptest::prelude::*;

    fn log(n: usize) -> Ledger {
        let key = Keypair::derive("owner", 0);
        let mut l = Ledger::new();
        for i in 0..n {
            l.append(EventKind::ALL[i % 4], format!("i={i}"), &key);
        }
        l
    }

    #[test]
    fn untampered_log_verifies() {
        assert_eq!(log(10).verify(), Ok(()));
        assert_eq!(Ledger::new().verify(), Ok(()));
    }

    #[test]
    fn payload_mutation_is_located() {
        let mut events = log(10).events().to_vec();
        events[5].payload.push('!');
        assert_eq!(verify(&events), Err(5));
    }

    #[test]
    fn reorder_is_located_at_first_moved_event() {
        let mut events = log(10).events().to_vec();
        events.swap(3, 6);
        assert_eq!(verify(&events), Err(3));
    }

    #[test]
    fn foreign_signature_is_rejected() {
        let mut events = log(4).events().to_vec();
        events[2].signature = Keypair::derive("mallory", 0).sign(&events[2].this_hash);
        assert_eq!(verify(&events), Err(2));
    }

    proptest! {
        #[test]
        fn appends_preserve_validity(n in 0usize..12, extra in 1usize..4) {
            let key = Keypair::derive("owner", 0);
            let mut l = log(n);
            for j in 0..extra {
                l.append(EventKind::Contribution, format!("j={j}"), &key);
                prop_assert_eq!(l.verify(), Ok(()));
            }
        }

        #[test]
        fn any_in_place_mutation_is_detected(n in 1usize..12, at in 0usize..12, byte in 0usize..8) {
            let at = at % n;
            let mut events = log(n).events().to_vec();
            match byte % 4 {
                0 => events[at].payload.push('x'),
                1 => events[at].seq += 1,
                2 => events[at].kind = if events[at].kind == EventKind::Slash { EventKind::Register } else { EventKind::Slash },
                _ => events[at].this_hash[byte] ^= 1,
            }
            prop_assert_eq!(verify(&events), Err(at));
        }
    }
}
