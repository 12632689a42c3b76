use std::collections::BTreeMap;
use std::fmt;

use crate::codec::{DecodeError, Decoder, Encoder};

use super::VirtError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IdClass {
    Tid,
    Conn,
}

impl IdClass {
    fn code(self) -> u8 {
        match self {
            IdClass::Tid => 0,
            IdClass::Conn => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(IdClass::Tid),
            1 => Some(IdClass::Conn),
            _ => None,
        }
    }
}

impl fmt::Display for IdClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IdClass::Tid => "tid",
            IdClass::Conn => "conn-handle",
        })
    }
}

/// An id tagged with the resource class it names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassedId {
    pub class: IdClass,
    pub id: u64,
}

impl ClassedId {
    pub fn tid(id: u64) -> Self {
        Self { class: IdClass::Tid, id }
    }

    pub fn conn(id: u64) -> Self {
        Self { class: IdClass::Conn, id }
    }
}

/// Bijective virtual <-> real id map for one resource class. Virtual ids are
/// dense and start at 1; they are never reassigned and survive restarts,
/// while the real side is rewritten by [`TranslationTable::remap_on_restart`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranslationTable {
    class: IdClass,
    forward: BTreeMap<u64, u64>,
    reverse: BTreeMap<u64, u64>,
    next_virtual: u64,
}

impl TranslationTable {
    pub fn new(class: IdClass) -> Self {
        Self {
            class,
            forward: BTreeMap::new(),
            reverse: BTreeMap::new(),
            next_virtual: 1,
        }
    }

    pub fn class(&self) -> IdClass {
        self.class
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn register(&mut self, real: u64) -> Result<u64, VirtError> {
        if self.reverse.contains_key(&real) {
            return Err(VirtError::DuplicateReal {
                class: self.class,
                real,
            });
        }
        let virt = self.next_virtual;
        self.next_virtual += 1;
        self.forward.insert(virt, real);
        self.reverse.insert(real, virt);
        Ok(virt)
    }

    pub fn unregister_real(&mut self, real: u64) -> Result<u64, VirtError> {
        let virt = self.reverse.remove(&real).ok_or(VirtError::UnknownReal {
            class: self.class,
            id: real,
        })?;
        self.forward.remove(&virt);
        Ok(virt)
    }

    fn check_class(&self, id: ClassedId) -> Result<(), VirtError> {
        if id.class != self.class {
            return Err(VirtError::WrongClass {
                expected: self.class,
                got: id.class,
            });
        }
        Ok(())
    }

    pub fn virt_to_real(&self, vid: ClassedId) -> Result<u64, VirtError> {
        self.check_class(vid)?;
        self.forward
            .get(&vid.id)
            .copied()
            .ok_or(VirtError::UnknownVirtual {
                class: self.class,
                id: vid.id,
            })
    }

    pub fn real_to_virt(&self, rid: ClassedId) -> Result<u64, VirtError> {
        self.check_class(rid)?;
        self.reverse
            .get(&rid.id)
            .copied()
            .ok_or(VirtError::UnknownReal {
                class: self.class,
                id: rid.id,
            })
    }

    /// Same-class shorthand for [`Self::virt_to_real`].
    pub fn to_real(&self, vid: u64) -> Result<u64, VirtError> {
        self.virt_to_real(ClassedId {
            class: self.class,
            id: vid,
        })
    }

    pub fn to_virtual(&self, rid: u64) -> Result<u64, VirtError> {
        self.real_to_virt(ClassedId {
            class: self.class,
            id: rid,
        })
    }

    pub fn entries(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.forward.iter().map(|(&v, &r)| (v, r))
    }

    /// Point every virtual id at the new real id of its resource. All-or-nothing.
    pub fn remap_on_restart(&mut self, assignment: &BTreeMap<u64, u64>) -> Result<(), VirtError> {
        let mut forward = BTreeMap::new();
        let mut reverse = BTreeMap::new();
        for (&virt, &old) in &self.forward {
            let new = *assignment.get(&old).ok_or(VirtError::MissingAssignment {
                class: self.class,
                real: old,
            })?;
            if reverse.insert(new, virt).is_some() {
                return Err(VirtError::Collision {
                    class: self.class,
                    real: new,
                });
            }
            forward.insert(virt, new);
        }
        self.forward = forward;
        self.reverse = reverse;
        Ok(())
    }

    /// Full scan: forward and reverse are exact inverses.
    pub fn is_bijective(&self) -> bool {
        self.forward.len() == self.reverse.len()
            && self
                .forward
                .iter()
                .all(|(v, r)| self.reverse.get(r) == Some(v))
    }

    pub fn encode(&self, e: &mut Encoder) {
        e.u8(self.class.code()).u64(self.next_virtual).u32(self.forward.len() as u32);
        for (v, r) in self.entries() {
            e.u64(v).u64(r);
        }
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let code = d.u8()?;
        let class = IdClass::from_code(code).ok_or(DecodeError::Invalid {
            what: "id class",
            value: code as u64,
        })?;
        let mut t = TranslationTable::new(class);
        t.next_virtual = d.u64()?;
        let n = d.u32()?;
        for _ in 0..n {
            let (v, r) = (d.u64()?, d.u64()?);
            if v >= t.next_virtual || t.forward.insert(v, r).is_some() || t.reverse.insert(r, v).is_some() {
                return Err(DecodeError::Invalid {
                    what: "translation entry",
                    value: v,
                });
            }
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        self.encode(&mut e);
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(bytes);
        let t = Self::decode(&mut d)?;
        d.finish()?;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_virtual_id_is_one() {
        let mut t = TranslationTable::new(IdClass::Tid);
        assert_eq!(t.register(1).unwrap(), 1);
        assert_eq!(
            t.register(1),
            Err(VirtError::DuplicateReal { class: IdClass::Tid, real: 1 })
        );
    }

    #[test]
    fn lookups() {
        let mut t = TranslationTable::new(IdClass::Tid);
        assert_eq!(
            t.to_real(42),
            Err(VirtError::UnknownVirtual { class: IdClass::Tid, id: 42 })
        );
        t.register(9).unwrap();
        assert_eq!(t.to_real(1), Ok(9));
        assert_eq!(t.to_virtual(9), Ok(1));
        assert_eq!(
            t.virt_to_real(ClassedId::conn(1)),
            Err(VirtError::WrongClass { expected: IdClass::Tid, got: IdClass::Conn })
        );
    }

    #[test]
    fn remap_keeps_virtual_ids() {
        let mut t = TranslationTable::new(IdClass::Tid);
        t.register(1).unwrap();
        t.register(2).unwrap();
        t.remap_on_restart(&BTreeMap::from([(1, 7), (2, 8)])).unwrap();
        assert_eq!(t.entries().collect::<Vec<_>>(), vec![(1, 7), (2, 8)]);
        assert!(t.is_bijective());
    }

    #[test]
    fn remap_collision_and_missing() {
        let mut t = TranslationTable::new(IdClass::Tid);
        t.register(1).unwrap();
        t.register(2).unwrap();
        let before = t.clone();
        assert_eq!(
            t.remap_on_restart(&BTreeMap::from([(1, 7), (2, 7)])),
            Err(VirtError::Collision { class: IdClass::Tid, real: 7 })
        );
        assert_eq!(
            t.remap_on_restart(&BTreeMap::from([(1, 7)])),
            Err(VirtError::MissingAssignment { class: IdClass::Tid, real: 2 })
        );
        assert_eq!(t, before);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Register(u64),
        Unregister(u64),
        Remap(u64),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u64..40).prop_map(Op::Register),
            (0u64..40).prop_map(Op::Unregister),
            (1u64..1000).prop_map(Op::Remap),
        ]
    }

    proptest! {
        #[test]
        fn bijection_survives_any_operation_sequence(ops in proptest::collection::vec(op(), 0..60)) {
            let mut t = TranslationTable::new(IdClass::Conn);
            let mut issued = Vec::new();
            for op in ops {
                match op {
                    Op::Register(r) => {
                        if let Ok(v) = t.register(r) {
                            prop_assert!(!issued.contains(&v));
                            issued.push(v);
                        }
                    }
                    Op::Unregister(r) => { let _ = t.unregister_real(r); }
                    Op::Remap(offset) => {
                        let a: BTreeMap<u64, u64> = t.entries().map(|(_, r)| (r, r + offset)).collect();
                        let virts: Vec<u64> = t.entries().map(|(v, _)| v).collect();
                        t.remap_on_restart(&a).unwrap();
                        prop_assert_eq!(virts, t.entries().map(|(v, _)| v).collect::<Vec<_>>());
                    }
                }
                prop_assert!(t.is_bijective());
                for (v, r) in t.entries() {
                    prop_assert_eq!(t.to_real(t.to_virtual(r).unwrap()).unwrap(), r);
                    prop_assert_eq!(t.to_virtual(t.to_real(v).unwrap()).unwrap(), v);
                }
            }
            prop_assert_eq!(TranslationTable::from_bytes(&t.to_bytes()).unwrap(), t);
        }
    }
}
