//! Writes the sample inputs used in the README to `inputs/`.

use modcurv::lab::reference_dilaton;
use modcurv::nctorus::{AlgebraParams, TorusElement};
use num_complex::Complex64 as C64;

fn main() -> modcurv::error::Result<()> {
    let p = AlgebraParams::standard();
    std::fs::create_dir_all("inputs")?;
    let h = reference_dilaton(p);
    std::fs::write("inputs/reference_dilaton.json", serde_json::to_string_pretty(&h.to_json(true))?)?;
    let probe = TorusElement::hermitian_from(p, [((1, 0), C64::new(1.0, 0.0))]);
    std::fs::write("inputs/probe_u1.json", serde_json::to_string_pretty(&probe.to_json(true))?)?;
    Ok(())
}
