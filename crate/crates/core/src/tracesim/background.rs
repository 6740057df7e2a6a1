//! Seed-driven background system load.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::domain::ResourceUtilization;

/// Generator of pre-execution resource utilization snapshots. Intensity 0
/// is a fully idle machine; large intensities saturate every resource.
#[derive(Debug, Clone)]
pub struct BackgroundLoad {
    intensity: f64,
    rng: ChaCha8Rng,
}

impl BackgroundLoad {
    pub fn new(intensity: f64, seed: u64) -> BackgroundLoad {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0xB06);
        BackgroundLoad { intensity: intensity.max(0.0), rng }
    }

    pub fn idle() -> BackgroundLoad {
        BackgroundLoad::new(0.0, 0)
    }

    pub fn saturated() -> BackgroundLoad {
        BackgroundLoad::new(1e9, 0)
    }
}

/// Draw one utilization snapshot. Components are clamped to `[0, 1]`; an
/// idle generator yields exactly (0,0,0) and a saturated one (1,1,1).
pub fn snapshot_utilization(load: &mut BackgroundLoad) -> ResourceUtilization {
    // Typical skew: CPU fills first, then memory, then IO.
    const BASE: [f64; 3] = [1.0, 0.85, 0.7];
    let jitter_scale = 0.15 * load.intensity.min(1.0);
    let mut parts = [0.0; 3];
    for (p, base) in parts.iter_mut().zip(BASE) {
        let z: f64 = load.rng.sample(StandardNormal);
        *p = (load.intensity * base + jitter_scale * z).clamp(0.0, 1.0);
    }
    ResourceUtilization { cpu: parts[0], mem: parts[1], io: parts[2] }
}
