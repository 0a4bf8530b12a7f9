//! Per-class pixel and instance statistics over semantic label maps.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Pixel and instance counts per class over a set of label maps.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassFrequencyTable {
    pub pixel_counts: BTreeMap<u32, u64>,
    pub instance_counts: BTreeMap<u32, u64>,
    pub total_pixels: u64,
    pub total_instances: u64,
}

impl ClassFrequencyTable {
    pub fn pixel_count(&self, class: u32) -> u64 {
        self.pixel_counts.get(&class).copied().unwrap_or(0)
    }

    pub fn instance_count(&self, class: u32) -> u64 {
        self.instance_counts.get(&class).copied().unwrap_or(0)
    }

    /// Pixel frequency of a class as a fraction of all counted pixels.
    pub fn pixel_frequency(&self, class: u32) -> f64 {
        if self.total_pixels == 0 {
            0.0
        } else {
            self.pixel_count(class) as f64 / self.total_pixels as f64
        }
    }
}

/// A 4-connected region of equal-class pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub class: u32,
    /// Pixels as (row, col), in row-major discovery order.
    pub pixels: Vec<(usize, usize)>,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

/// Finds all 4-connected same-class components, in row-major order of each
/// component's first pixel. Deterministic.
pub fn connected_components(map: &Array2<u32>) -> Vec<Component> {
    let (h, w) = map.dim();
    let mut visited = vec![false; h * w];
    let mut components = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    for sy in 0..h {
        for sx in 0..w {
            if visited[sy * w + sx] {
                continue;
            }
            let class = map[[sy, sx]];
            let mut pixels = Vec::new();
            visited[sy * w + sx] = true;
            queue.push_back((sy, sx));
            while let Some((y, x)) = queue.pop_front() {
                pixels.push((y, x));
                let mut push = |ny: usize, nx: usize, visited: &mut Vec<bool>| {
                    if !visited[ny * w + nx] && map[[ny, nx]] == class {
                        visited[ny * w + nx] = true;
                        queue.push_back((ny, nx));
                    }
                };
                if y > 0 {
                    push(y - 1, x, &mut visited);
                }
                if y + 1 < h {
                    push(y + 1, x, &mut visited);
                }
                if x > 0 {
                    push(y, x - 1, &mut visited);
                }
                if x + 1 < w {
                    push(y, x + 1, &mut visited);
                }
            }
            components.push(Component { class, pixels });
        }
    }
    components
}

/// Counts pixels per class exactly and instances per class via 4-connected
/// component labeling. An empty input yields an all-zero table.
pub fn compute_class_frequencies(label_maps: &[Array2<u32>]) -> ClassFrequencyTable {
    let mut table = ClassFrequencyTable::default();
    for map in label_maps {
        for &class in map.iter() {
            *table.pixel_counts.entry(class).or_insert(0) += 1;
            table.total_pixels += 1;
        }
        for comp in connected_components(map) {
            *table.instance_counts.entry(comp.class).or_insert(0) += 1;
            table.total_instances += 1;
        }
    }
    table
}
