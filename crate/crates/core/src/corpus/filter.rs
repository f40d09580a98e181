use std::collections::HashMap;

use super::interaction::Interaction;

fn counts(data: &[Interaction], key: impl Fn(&Interaction) -> u64) -> HashMap<u64, usize> {
    let mut m = HashMap::new();
    for it in data {
        *m.entry(key(it)).or_insert(0) += 1;
    }
    m
}

/// Drops users, then items, with fewer than `k` interactions. With
/// `iterative` the two passes repeat until nothing changes (a true k-core);
/// otherwise each pass runs once.
pub fn k_core_filter(data: &[Interaction], k: usize, iterative: bool) -> Vec<Interaction> {
    let mut cur = data.to_vec();
    if k == 0 {
        return cur;
    }
    loop {
        let before = cur.len();
        let users = counts(&cur, |i| i.user_id);
        cur.retain(|i| users[&i.user_id] >= k);
        let items = counts(&cur, |i| i.item_id);
        cur.retain(|i| items[&i.item_id] >= k);
        if !iterative || cur.len() == before {
            return cur;
        }
    }
}
