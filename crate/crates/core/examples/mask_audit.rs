//! Prints the compositional attention mask of a two-object layout and runs
//! the brute-force mask comparison and the no-leakage check.

use scenecomp::audit::{audit_model, leakage_audit, mask_audit, two_object_fixture};

fn main() -> scenecomp::Result<()> {
    let (membership, mask) = two_object_fixture();
    println!("token membership {membership:?}; rows/cols: 3 tokens, then slots A and B");
    for i in 0..mask.shape()[0] {
        let row: String = (0..mask.shape()[1])
            .map(|j| if mask.at(i, j) == 0.0 { '1' } else { '.' })
            .collect();
        println!("  {row}");
    }

    let m = mask_audit(1000, 0)?;
    println!(
        "mask audit: {} layouts, {} mismatches, fixture {}",
        m.instances,
        m.mismatches,
        if m.fixture_ok { "ok" } else { "WRONG" }
    );

    let leak = leakage_audit(&audit_model(0)?, 10, 0)?;
    println!(
        "leakage: {} weights over {} passes, {} nonzero across disjoint objects",
        leak.weights_checked, leak.passes, leak.violations
    );
    Ok(())
}
