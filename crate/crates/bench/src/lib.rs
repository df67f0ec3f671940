//! Shared setup for the criterion benchmarks: a trained-shape model on the
//! tiny search space with a deterministic synthetic batch. Nothing here is
//! tuned — the benches measure the hot paths (tape step, routing, merging,
//! evolutionary search), not model quality.

use loramix_core::data::synth_data;
use loramix_core::space::{Grouping, GroupingStrategy, SearchSpace, SubnetConfig};
use loramix_core::tensor::Tensor;
use loramix_core::vit::{patchify, SupernetWeights};
use loramix_core::{ExpertBank, Router, RouterConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CLASSES: usize = 4;
pub const BATCH: usize = 32;
pub const RANK: usize = 8;

/// Everything the benches share: space, weights, expert bank, router,
/// grouping, and one pre-patchified batch.
pub struct BenchModel {
    pub space: SearchSpace,
    pub grouping: Grouping,
    pub weights: SupernetWeights,
    pub bank: ExpertBank,
    pub router: Router,
    pub subnet: SubnetConfig,
    pub patches: Tensor,
    pub labels: Vec<usize>,
}

impl BenchModel {
    pub fn new() -> Self {
        let space = SearchSpace::tiny(CLASSES);
        let grouping = Grouping::new(&space, GroupingStrategy::Architectural);
        let k = space.group_count();
        let mut rng = ChaCha8Rng::seed_from_u64(0xBE7C);
        let weights = SupernetWeights::init(&space, &mut rng);
        let bank = ExpertBank::init(&space, k, RANK, &mut rng);
        let router = Router::group_wise_init(&RouterConfig::default(), &space, k, &mut rng)
            .expect("k matches group count");
        let subnet = SubnetConfig::parse_text("3:24:[2,4;1,2;2,4]").expect("valid subnet");
        let data = synth_data(CLASSES, BATCH, space.image_size, 0.2, &mut rng);
        let idx: Vec<usize> = (0..BATCH).collect();
        let (images, labels) = data.gather(&idx);
        let patches = patchify(&images, space.image_size, space.patch_size);
        BenchModel {
            space,
            grouping,
            weights,
            bank,
            router,
            subnet,
            patches,
            labels,
        }
    }
}

impl Default for BenchModel {
    fn default() -> Self {
        Self::new()
    }
}
