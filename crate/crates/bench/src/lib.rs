//! Fixtures shared by the benchmarks.

use tlsi_core::data::{generate_synthetic, Dataset, SyntheticSpec};
use tlsi_core::experiment::{prepare_splits, DataConfig};
use tlsi_core::model::EncodedExample;
use tlsi_core::{ModelConfig, TlsiModel, Variant};

/// A model of width `dim` and `n` encoded training examples from a
/// synthetic log with full-length histories.
pub fn fixture(variant: Variant, dim: usize, n: usize) -> (TlsiModel, Vec<EncodedExample>) {
    let spec = SyntheticSpec::patterned(n.max(50), 500, 20, 1);
    let ds = Dataset::from_records(&generate_synthetic(&spec).expect("valid spec"));
    let splits = prepare_splits(&ds, &DataConfig::default(), 100, 1).expect("splits");
    let mut c = ModelConfig::new(
        variant,
        ds.vocab.items.table_size(),
        ds.vocab.categories.table_size(),
    );
    c.item_dim = dim / 2;
    c.category_dim = dim - dim / 2;
    c.hidden_dim = dim;
    c.mlp_hidden = 2 * dim;
    let model = TlsiModel::new(c, 0).expect("valid config");
    let mut examples = model
        .encode_all(&splits.train, &ds.clock)
        .expect("encodable");
    examples.truncate(n);
    (model, examples)
}
