//! Marching-cubes triangulation table, derived from face rules rather than
//! typed in.
//!
//! Corner `i` sits at `(i & 1 ^ (i >> 1 & 1), i >> 1 & 1, i >> 2 & 1)` in the
//! usual ordering (0..3 around the bottom face, 4..7 above them). On each cube
//! face the sign changes are walked counter-clockwise as seen from outside;
//! every outside-to-inside crossing is joined to the next inside-to-outside
//! crossing, which separates diagonal inside corners on ambiguous faces.
//! Because neighbouring cubes apply the same rule to a shared face, the
//! resulting surface is closed.

use std::sync::OnceLock;

/// Corner pairs of the twelve cube edges.
pub(crate) const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Corner offsets `(x, y, z)`.
pub(crate) const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Face corners, counter-clockwise seen from outside the cube.
const FACES: [[usize; 4]; 6] = [
    [0, 3, 2, 1],
    [4, 5, 6, 7],
    [0, 1, 5, 4],
    [3, 7, 6, 2],
    [0, 4, 7, 3],
    [1, 2, 6, 5],
];

fn edge_between(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|&(p, q)| (p, q) == (a, b) || (p, q) == (b, a))
        .expect("adjacent corners")
}

/// Triangles (as edge triples) for one inside-corner mask.
fn triangulate(mask: usize) -> Vec<[u8; 3]> {
    let inside = |c: usize| mask >> c & 1 == 1;
    let mut next = [usize::MAX; 12];
    for face in FACES {
        let mut entries = Vec::new();
        let mut exits = Vec::new();
        for k in 0..4 {
            let (a, b) = (face[k], face[(k + 1) % 4]);
            match (inside(a), inside(b)) {
                (false, true) => entries.push((k, edge_between(a, b))),
                (true, false) => exits.push((k, edge_between(a, b))),
                _ => {}
            }
        }
        for &(k, e) in &entries {
            // First exit after this entry, walking forward around the face.
            let (_, x) = *exits
                .iter()
                .min_by_key(|(j, _)| (j + 4 - k) % 4)
                .expect("face crossings come in pairs");
            next[e] = x;
        }
    }
    let mut used = [false; 12];
    let mut tris = Vec::new();
    for start in 0..12 {
        if next[start] == usize::MAX || used[start] {
            continue;
        }
        let mut loop_edges = vec![start];
        used[start] = true;
        let mut e = next[start];
        while e != start {
            used[e] = true;
            loop_edges.push(e);
            e = next[e];
        }
        for i in 1..loop_edges.len() - 1 {
            tris.push([loop_edges[0] as u8, loop_edges[i] as u8, loop_edges[i + 1] as u8]);
        }
    }
    tris
}

pub(crate) fn table() -> &'static [Vec<[u8; 3]>; 256] {
    static TABLE: OnceLock<[Vec<[u8; 3]>; 256]> = OnceLock::new();
    TABLE.get_or_init(|| std::array::from_fn(triangulate))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_cases_are_empty() {
        assert!(table()[0].is_empty());
        assert!(table()[255].is_empty());
    }

    #[test]
    fn single_corner_gives_one_triangle() {
        for c in 0..8 {
            let t = &table()[1 << c];
            assert_eq!(t.len(), 1);
            let mut edges: Vec<usize> = t[0].iter().map(|&e| e as usize).collect();
            edges.sort();
            let mut expect: Vec<usize> = (0..12)
                .filter(|&e| EDGES[e].0 == c || EDGES[e].1 == c)
                .collect();
            expect.sort();
            assert_eq!(edges, expect);
        }
    }

    #[test]
    fn uses_exactly_the_crossing_edges() {
        for mask in 0..256usize {
            let mut used = [false; 12];
            for t in &table()[mask] {
                for &e in t {
                    used[e as usize] = true;
                }
            }
            for (e, &(a, b)) in EDGES.iter().enumerate() {
                let crossing = (mask >> a & 1) != (mask >> b & 1);
                assert_eq!(used[e], crossing, "mask {mask} edge {e}");
            }
        }
    }
}
