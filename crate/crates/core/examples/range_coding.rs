//! Range coding a symbol stream under quantized CDF tables, with the tables
//! serialized into the flat blob an external coder would receive.
//!
//! cargo run --release --example range_coding

use omni_icm::coder::{coder_for, table_cross_entropy, CoderBackend, EntropyCoder, ReferenceCoder, SymbolPlan};
use omni_icm::entropy_models::gaussian::gmm_support_pmf;
use omni_icm::entropy_models::{tables_from_blob, tables_to_blob, CdfTable, GmmParams, PRECISION};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

fn main() -> anyhow::Result<()> {
    // one table per scale, symbols -8..=8 around a zero mean
    let scales = [0.5, 1.0, 2.0, 4.0];
    let tables = scales
        .iter()
        .map(|&s| CdfTable::from_pmf(-8, &gmm_support_pmf(&GmmParams::single(0.0, s), 0.0, -8, 8), PRECISION))
        .collect::<Result<Vec<_>, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut plan = SymbolPlan::default();
    for i in 0..20_000 {
        let t = i % scales.len();
        let v: f64 = rng.sample(Normal::new(0.0, scales[t])?);
        plan.push((v.round() as i32).clamp(-8, 8), t as u32);
    }

    let bytes = ReferenceCoder.encode(&plan, &tables)?;
    let back = ReferenceCoder.decode(&bytes, &plan.table_indexes, &tables)?;
    assert_eq!(back, plan.symbols);
    let ideal = table_cross_entropy(&plan, &tables);
    println!(
        "{} symbols: {} bytes, ideal {:.0} bits, overhead {:.1} bits",
        plan.len(),
        bytes.len(),
        ideal,
        8.0 * bytes.len() as f64 - ideal
    );

    // the count-prefixed blob round-trips and drives the flat interface
    let blob = tables_to_blob(&tables);
    assert_eq!(tables_from_blob(&blob)?, tables);
    let flat = ReferenceCoder.encode_flat(&plan.symbols, &plan.table_indexes, &blob)?;
    assert_eq!(flat, bytes);
    println!("tables blob: {} bytes for {} tables", blob.len(), tables.len());

    match coder_for(CoderBackend::Accelerated) {
        Ok(c) => println!("accelerated backend available: {}", c.name()),
        Err(e) => println!("accelerated backend: {e}"),
    }
    Ok(())
}
