use std::collections::BTreeMap;

use super::AttackSession;

/// Groups sessions against the same destination AS whose `[start, end]`
/// intervals overlap, closing transitively. Each group of two or more gets
/// the smallest member session id; singletons are left ungrouped. Open
/// sessions count as extending without bound.
pub fn correlate_multivector(sessions: &mut [AttackSession]) {
    let mut by_victim: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in sessions.iter_mut().enumerate() {
        s.multi_vector_group = None;
        by_victim.entry(s.dst_as).or_default().push(i);
    }

    for mut idx in by_victim.into_values() {
        idx.sort_by_key(|&i| (sessions[i].start, sessions[i].session_id));
        let mut component: Vec<usize> = Vec::new();
        let mut reach = 0u64;
        for i in idx {
            let (start, end) = (sessions[i].start, sessions[i].effective_end());
            if !component.is_empty() && start > reach {
                assign(sessions, &component);
                component.clear();
            }
            reach = if component.is_empty() { end } else { reach.max(end) };
            component.push(i);
        }
        assign(sessions, &component);
    }
}

fn assign(sessions: &mut [AttackSession], component: &[usize]) {
    if component.len() < 2 {
        return;
    }
    let group = component
        .iter()
        .map(|&i| sessions[i].session_id)
        .min()
        .expect("non-empty");
    for &i in component {
        sessions[i].multi_vector_group = Some(group);
    }
}
