use crate::plugin::LockImage;
use crate::runtime::LockRecord;
use crate::virt::{IdClass, TranslationTable, VirtError};

/// New owner records for every held lock: the current real tid of the
/// virtual task that owned it at checkpoint time. Unheld locks are skipped.
pub fn patch_locks(locks: &[LockImage], tids: &TranslationTable) -> Result<Vec<LockRecord>, VirtError> {
    locks
        .iter()
        .filter_map(|l| l.owner_real.map(|real| (l, real)))
        .map(|(l, real)| {
            let vid = l.owner_virtual.ok_or(VirtError::UnknownReal {
                class: IdClass::Tid,
                id: real,
            })?;
            Ok(LockRecord {
                id: l.id,
                owner: Some(tids.to_real(vid)?),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn owner_follows_virtual_tid() {
        let mut t = TranslationTable::new(IdClass::Tid);
        t.register(1).unwrap();
        t.register(2).unwrap();
        t.remap_on_restart(&BTreeMap::from([(1, 6), (2, 7)])).unwrap();
        let locks = [
            LockImage { id: 1, owner_real: Some(2), owner_virtual: Some(2) },
            LockImage { id: 2, owner_real: None, owner_virtual: None },
        ];
        assert_eq!(patch_locks(&locks, &t).unwrap(), vec![LockRecord { id: 1, owner: Some(7) }]);
        assert_eq!(patch_locks(&[], &t).unwrap(), vec![]);
        let stray = [LockImage { id: 3, owner_real: Some(42), owner_virtual: None }];
        assert_eq!(
            patch_locks(&stray, &t),
            Err(VirtError::UnknownReal { class: IdClass::Tid, id: 42 })
        );
    }
}
