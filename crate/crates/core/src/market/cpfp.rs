use std::collections::HashMap;

use super::{TxRecord, WeightSource};
use crate::error::{Error, Result};

/// Collapses every connected child-pays-for-parent group into one package
/// record. `links` are `(child_id, parent_id)` pairs.
///
/// Package totals are sums over members; the fee rate follows from the
/// summed fee over summed vsize. Entry time is the earliest member entry and
/// confirmation fields come from the last member to confirm (absent if any
/// member is unconfirmed). The RBF flag is the disjunction over members.
pub fn collapse_cpfp(txs: Vec<TxRecord>, links: &[(String, String)]) -> Result<Vec<TxRecord>> {
    if links.is_empty() {
        return Ok(txs);
    }
    let index: HashMap<&str, usize> = txs.iter().enumerate().map(|(i, t)| (t.tx_id.as_str(), i)).collect();
    let n = txs.len();
    let mut parents: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut uf = UnionFind::new(n);
    for (child, parent) in links {
        let c = *index.get(child.as_str()).ok_or_else(|| Error::UnknownTx(child.clone()))?;
        let p = *index.get(parent.as_str()).ok_or_else(|| Error::UnknownTx(parent.clone()))?;
        parents[c].push(p);
        uf.union(c, p);
    }
    if let Some(i) = find_cycle(&parents) {
        return Err(Error::CpfpCycle(txs[i].tx_id.clone()));
    }

    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 0..n {
        groups.entry(uf.find(i)).or_default().push(i);
    }
    let mut slots: Vec<Option<TxRecord>> = txs.into_iter().map(Some).collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let members = &groups[&uf.find(i)];
        if members.len() == 1 {
            out.push(slots[i].take().expect("unvisited"));
        } else if members[0] == i {
            let recs: Vec<TxRecord> = members.iter().map(|&m| slots[m].take().expect("unvisited")).collect();
            out.push(merge_package(recs));
        }
    }
    Ok(out)
}

fn merge_package(mut members: Vec<TxRecord>) -> TxRecord {
    members.sort_by(|a, b| a.entry_time.total_cmp(&b.entry_time).then_with(|| a.tx_id.cmp(&b.tx_id)));
    let first = &members[0];
    let mut pkg = first.clone();
    pkg.fee_sats = members.iter().map(|m| m.fee_sats).sum();
    pkg.vsize_vb = members.iter().map(|m| m.vsize_vb).sum();
    pkg.weight_wu = members.iter().map(|m| m.weight_wu).sum();
    pkg.n_inputs = members.iter().map(|m| m.n_inputs).sum();
    pkg.n_outputs = members.iter().map(|m| m.n_outputs).sum();
    pkg.total_output_sats = members.iter().map(|m| m.total_output_sats).sum();
    pkg.rbf = members.iter().any(|m| m.rbf);
    pkg.has_op_return = members.iter().any(|m| m.has_op_return);
    pkg.has_inscription = members.iter().any(|m| m.has_inscription);
    pkg.cpfp_members = members.iter().map(|m| m.tx_id.clone()).collect();
    pkg.weight_source = if members.iter().all(|m| m.weight_source == WeightSource::External) {
        WeightSource::External
    } else {
        WeightSource::Node
    };

    let soonest = members
        .iter()
        .filter(|m| m.respend_blocks.is_some())
        .min_by(|a, b| a.respend_blocks.unwrap().total_cmp(&b.respend_blocks.unwrap()));
    pkg.respend_blocks = soonest.and_then(|m| m.respend_blocks);
    pkg.impatience = soonest.and_then(|m| m.impatience);

    let all_confirmed = members.iter().all(|m| m.confirm_height.is_some() && m.confirm_time.is_some());
    if all_confirmed {
        let last = members
            .iter()
            .max_by(|a, b| a.confirm_time.unwrap().total_cmp(&b.confirm_time.unwrap()))
            .expect("nonempty");
        pkg.confirm_time = last.confirm_time;
        pkg.confirm_height = last.confirm_height;
        pkg.wait_blocks = match (first.wait_blocks, first.confirm_height, last.confirm_height) {
            (Some(w), Some(h0), Some(h1)) => Some(w + h1.saturating_sub(h0)),
            _ => None,
        };
    } else {
        pkg.confirm_time = None;
        pkg.confirm_height = None;
        pkg.wait_blocks = None;
    }
    pkg
}

/// Returns a node on a directed cycle, if any.
fn find_cycle(parents: &[Vec<usize>]) -> Option<usize> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let mut mark = vec![Mark::New; parents.len()];
    for root in 0..parents.len() {
        if mark[root] != Mark::New {
            continue;
        }
        let mut stack = vec![(root, 0usize)];
        mark[root] = Mark::Active;
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            if let Some(&p) = parents[node].get(*next) {
                *next += 1;
                match mark[p] {
                    Mark::Active => return Some(p),
                    Mark::New => {
                        mark[p] = Mark::Active;
                        stack.push((p, 0));
                    }
                    Mark::Done => {}
                }
            } else {
                mark[node] = Mark::Done;
                stack.pop();
            }
        }
    }
    None
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the smaller index as root so roots are stable
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}
