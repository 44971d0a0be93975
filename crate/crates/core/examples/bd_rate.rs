//! BD-rate between two RD curves, plus the CSV and SVG outputs the CLI
//! writes for `plot-rd`.
//!
//! cargo run --release --example bd_rate -- [out_dir]

use omni_icm::evalkit::{bd_rate, rd_plot_svg, read_rd_csv, write_rd_csv, RdCurve, RdPoint};

fn curve(label: &str, pts: &[(f64, f64)]) -> anyhow::Result<RdCurve> {
    Ok(RdCurve::new(label, pts.iter().map(|&(bpp, metric)| RdPoint { bpp, metric }).collect())?)
}

fn main() -> anyhow::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/bd_rate".into()));
    std::fs::create_dir_all(&out)?;
    let anchor = curve("anchor", &[(0.10, 30.0), (0.20, 32.5), (0.40, 34.6), (0.80, 36.2)])?;
    let better = curve("test", &[(0.08, 30.1), (0.16, 32.6), (0.33, 34.7), (0.70, 36.4)])?;

    println!("identical: {:.4}%", bd_rate(&anchor, &anchor)?);
    println!("test vs anchor: {:.4}%", bd_rate(&anchor, &better)?);
    println!("anchor vs test: {:.4}%", bd_rate(&better, &anchor)?);

    let csv = write_rd_csv(&[anchor.clone(), better.clone()]);
    assert_eq!(read_rd_csv(&csv)?, vec![anchor.clone(), better.clone()]);
    std::fs::write(out.join("curves.csv"), &csv)?;
    std::fs::write(out.join("curves.svg"), rd_plot_svg(&[anchor, better], "PSNR (dB)"))?;
    println!("wrote {}/curves.csv and curves.svg", out.display());
    Ok(())
}
