//! The energy slack is the numerical dissipation dropped from the exact
//! balance. On the smooth channel family it must shrink under refinement.

use crfv::manufactured::{convergence_study, ManufacturedCase, StudyParams};
use crfv::physics::PressureLaw;

#[test]
fn energy_slack_decays_under_refinement() {
    let law = PressureLaw::isentropic(1.0, 2.0).unwrap();
    let study = StudyParams { levels: vec![3, 4, 6], final_time: 2.0, consistency: false, ..StudyParams::default() };
    let rep = convergence_study(&ManufacturedCase::channel(law, 1.0, 0.0), &study);
    assert!(rep.failure.is_none(), "{:?}", rep.failure);
    let row = rep.row("energy_slack").unwrap();
    println!("{}", rep.table());
    assert!(row.values.iter().all(|&s| s > 0.0), "{:?}", row.values);
    assert!(row.decays(), "{row:?}");
}
