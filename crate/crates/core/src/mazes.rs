//! Mazes shipped with the crate.

use crate::env::{MazeError, MazeSpec};

const BUNDLED: &[(&str, &str)] = &[
    ("test5x5", include_str!("../mazes/test5x5.txt")),
    ("cross", include_str!("../mazes/cross.txt")),
    ("skull", include_str!("../mazes/skull.txt")),
    ("complex", include_str!("../mazes/complex.txt")),
    ("two_route", include_str!("../mazes/two_route.txt")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(n, _)| *n)
}

pub fn text(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Parses a bundled maze by name.
pub fn bundled(name: &str) -> Option<Result<MazeSpec, MazeError>> {
    text(name).map(|t| MazeSpec::parse(t, name))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Cell;
    use std::collections::HashSet;

    fn reachable(m: &MazeSpec) -> usize {
        let mut seen = HashSet::from([m.start_cell()]);
        let mut stack = vec![m.start_cell()];
        while let Some((r, c)) = stack.pop() {
            for (dr, dc) in [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)] {
                let (nr, nc) = ((r as i64 + dr) as usize, (c as i64 + dc) as usize);
                if !m.cell(nr, nc).is_wall() && seen.insert((nr, nc)) {
                    stack.push((nr, nc));
                }
            }
        }
        seen.len()
    }

    #[test]
    fn all_bundled_parse_and_are_connected() {
        for name in names() {
            let m = bundled(name).unwrap().unwrap();
            assert_eq!(m.name(), name);
            assert_eq!(reachable(&m), m.open_cells().len(), "{name}");
        }
    }

    #[test]
    fn goal_counts() {
        let goals = |n: &str| bundled(n).unwrap().unwrap().cells_of(Cell::GoalCandidate).len();
        assert_eq!(goals("cross"), 3);
        assert_eq!(goals("skull"), 4);
        assert!(bundled("complex").unwrap().unwrap().open_cells().len() >= 50);
        assert!(bundled("nope").is_none());
    }
}
