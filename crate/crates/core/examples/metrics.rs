//! Image quality metrics and error-map previews.

use sofpidr::eval::{error_map, error_map_legend, psnr, ssim, write_png, MetricReport, ERROR_MAP_GAIN};
use sofpidr::phantoms::{render_phantom, DeformSpec, PhantomSpec};
use sofpidr::Result;

fn main() -> Result<()> {
    let (h, w) = (64, 64);
    let out = std::env::temp_dir().join("sofpidr-examples");
    std::fs::create_dir_all(&out).map_err(|e| sofpidr::Error::io(&out, e))?;

    let f = render_phantom(&PhantomSpec::new(h, w), &DeformSpec::new(h, w), 0.0)?;
    let noisy = f.map(|v| v + 0.05 * ((v * 1e4).sin()));
    let shifted = render_phantom(&PhantomSpec::new(h, w), &DeformSpec::new(h, w), 0.5)?;

    println!("identical: PSNR {} dB, SSIM {}", psnr(&f, &f, 1.0)?, ssim(&f, &f, 1.0)?);
    let mut report = MetricReport::default();
    report.push(0, "noisy", &noisy, &f, None)?;
    report.push(0, "moved", &shifted, &f, None)?;
    print!("{}", report.to_csv());

    write_png(out.join("err_noisy.png"), &error_map(&noisy, &f, ERROR_MAP_GAIN)?)?;
    write_png(out.join("err_moved.png"), &error_map(&shifted, &f, ERROR_MAP_GAIN)?)?;
    println!("{}", error_map_legend(ERROR_MAP_GAIN));
    println!("error maps written to {}", out.display());
    Ok(())
}
