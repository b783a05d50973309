use std::collections::VecDeque;

use mobs_core::cnn_post::Connectivity;
use mobs_core::BinaryMask;

/// Breadth-first flood fill; labels numbered in scan order of each
/// component's first voxel.
#[allow(dead_code)]
pub fn flood_fill_labels(m: &BinaryMask, conn: Connectivity) -> (Vec<u32>, Vec<usize>) {
    let d = m.dims();
    let dz_range: &[isize] = match conn {
        Connectivity::Eight => &[0],
        Connectivity::TwentySix => &[-1, 0, 1],
    };
    let mut labels = vec![0u32; d.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..d.len() {
        if !m.data()[start] || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let [x, y, z] = d.coords(i);
            for &dz in dz_range {
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (nx, ny, nz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                        if nx < 0
                            || ny < 0
                            || nz < 0
                            || nx >= d.nx as isize
                            || ny >= d.ny as isize
                            || nz >= d.nz as isize
                        {
                            continue;
                        }
                        let j = d.index(nx as usize, ny as usize, nz as usize);
                        if m.data()[j] && labels[j] == 0 {
                            labels[j] = label;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}
