//! Linking per-slice detections into 3D chains.

use std::collections::BTreeMap;

use crate::geometry::{iou_unchecked, Box2D, Box3D};

/// Greedy chaining of one volume's detections, slices ascending. Boxes of a
/// slice pick their successor in descending score (then x1, y1); each takes
/// the not-yet-taken box on the next slice with the highest IoU above
/// `stack_iou` (ties: lower x1, then y1). Chains are returned ordered by
/// (first z, x1, y1).
pub fn stack_boxes(dets: &[(Box2D, f64)], stack_iou: f64) -> Vec<Box3D> {
    let mut slices: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, (b, _)) in dets.iter().enumerate() {
        slices.entry(b.z).or_default().push(i);
    }
    let pos = |a: &usize, b: &usize| {
        dets[*a].0.x1.total_cmp(&dets[*b].0.x1).then(dets[*a].0.y1.total_cmp(&dets[*b].0.y1))
    };
    for list in slices.values_mut() {
        list.sort_by(|a, b| dets[*b].1.total_cmp(&dets[*a].1).then(pos(a, b)));
    }
    let mut next: Vec<Option<usize>> = vec![None; dets.len()];
    let mut has_prev = vec![false; dets.len()];
    for (z, list) in &slices {
        let Some(cands) = slices.get(&(z + 1)) else { continue };
        for &i in list {
            let mut best: Option<(f64, usize)> = None;
            for &j in cands {
                if has_prev[j] {
                    continue;
                }
                let iou = iou_unchecked(&dets[i].0, &dets[j].0);
                if iou <= stack_iou {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bi, bj)) => iou > bi || (iou == bi && pos(&j, &bj).is_lt()),
                };
                if better {
                    best = Some((iou, j));
                }
            }
            if let Some((_, j)) = best {
                next[i] = Some(j);
                has_prev[j] = true;
            }
        }
    }
    let mut starts: Vec<usize> = (0..dets.len()).filter(|&i| !has_prev[i]).collect();
    starts.sort_by(|a, b| dets[*a].0.z.cmp(&dets[*b].0.z).then(pos(a, b)));
    starts
        .into_iter()
        .map(|s| {
            let mut members = vec![dets[s]];
            let mut cur = s;
            while let Some(n) = next[cur] {
                members.push(dets[n]);
                cur = n;
            }
            Box3D::from_members(members).expect("chain links consecutive slices")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(z: u32, x: f64) -> (Box2D, f64) {
        (Box2D::new(z, x, 0.0, x + 10.0, 10.0).unwrap(), 0.5)
    }

    #[test]
    fn examples() {
        let s = stack_boxes(&[b(3, 0.0), b(4, 0.0), b(5, 0.0)], 0.5);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].z_range(), (3, 5));
        assert_eq!(stack_boxes(&[b(3, 0.0), b(5, 0.0)], 0.5).len(), 2);
        assert_eq!(stack_boxes(&[b(3, 0.0), b(4, 5.0)], 0.5).len(), 2);
    }

    #[test]
    fn iou_of_exactly_half_does_not_link() {
        // [0,0,10,10] vs [0,0,10,5] -> 50 / 100.
        let a = (Box2D::new(0, 0.0, 0.0, 10.0, 10.0).unwrap(), 0.9);
        let c = (Box2D::new(1, 0.0, 0.0, 10.0, 5.0).unwrap(), 0.9);
        assert_eq!(stack_boxes(&[a, c], 0.5).len(), 2);
    }

    #[test]
    fn score_is_max_member() {
        let mut d = vec![b(0, 0.0), b(1, 1.0)];
        d[1].1 = 0.9;
        assert_eq!(stack_boxes(&d, 0.5)[0].score, 0.9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn members_are_conserved(boxes in proptest::collection::vec((0u32..6, 0.0..20.0f64, 0.0..20.0f64, 0.0..1.0f64), 0..25)) {
            let dets: Vec<(Box2D, f64)> = boxes.iter().map(|&(z, x, y, s)| (Box2D::new(z, x, y, x + 8.0, y + 8.0).unwrap(), s)).collect();
            let st = stack_boxes(&dets, 0.5);
            prop_assert_eq!(st.iter().map(|c| c.len()).sum::<usize>(), dets.len());
            for c in &st {
                for w in c.members().windows(2) {
                    prop_assert!(iou_unchecked(&w[0], &w[1]) > 0.5);
                }
            }
        }
    }
}
