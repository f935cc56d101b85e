//! Prints the simulated lifetime landscape of the shipped calibration.
//!
//! `cargo run --release -p dea-lab --example survey [replicates]`

use dea_lab::analysis::LifetimeParams;
use dea_lab::devicemodel::{DeviceModel, DeviceSpec, Drive, Filler, MaterialConfig};
use dea_lab::landscape::survey_cell;

fn main() {
    let reps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let model = DeviceModel::default();
    let params = LifetimeParams::default();
    let sample = DeviceSpec::test_sample();

    println!("field  freq   mean_life  censored  mean_disp");
    for field in [35.0, 40.0, 45.0, 50.0] {
        for freq in [1.0, 5.0, 10.0, 50.0] {
            let s = survey_cell(&model, &sample, &Drive::new(field, freq), 0..reps, &params).unwrap();
            println!(
                "{field:5} {freq:5} {:10.1} {:9.2} {:10.4}",
                s.mean_lifetime, s.censored_fraction, s.mean_displacement
            );
        }
    }

    for (field, freq) in [(40.0, 1.0), (45.0, 50.0)] {
        println!("\nmaterials at {field} V/um, {freq} Hz");
        let mut cells: Vec<MaterialConfig> = Filler::ALL.iter().map(|&f| MaterialConfig { filler: f, cnt_conc: 2.5 }).collect();
        for c in [1.8, 2.2, 2.9, 3.3] {
            cells.push(MaterialConfig { filler: Filler::CB, cnt_conc: c });
        }
        cells.push(MaterialConfig { filler: Filler::CG, cnt_conc: 2.9 });
        for m in cells {
            let spec = sample.clone().with_material(m);
            let s = survey_cell(&model, &spec, &Drive::new(field, freq), 1000..1000 + reps, &params).unwrap();
            println!("{m:8} {:10.1} {:9.2} {:10.4}", s.mean_lifetime, s.censored_fraction, s.mean_displacement);
        }
    }
}
