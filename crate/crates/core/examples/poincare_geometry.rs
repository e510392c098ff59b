//! Poincaré-ball primitives: projection, distance, weighted prototypes and
//! the residual hyperbolic block.
//!
//! ```text
//! cargo run --release --example poincare_geometry
//! ```

use hcfsln::geometry::{
    distance, project_point, prototype_of, residual_hyperbolic_block, PoincarePoint, MAX_NORM,
};
use hcfsln::tensor::{Tape, Tensor};

fn main() -> hcfsln::Result<()> {
    // tanh squashes any Euclidean vector into the open unit ball
    println!("projection (alpha = 1)");
    for scale in [0.1, 1.0, 3.0, 30.0] {
        let p = project_point(&[scale, -scale], 1.0)?;
        println!("  h = ({scale}, -{scale})  ->  |y| = {:.6}", p.norm());
    }
    println!("  every norm stays below {MAX_NORM}");

    // equal Euclidean steps cost more the closer they are to the boundary
    println!("\ndistance of a 0.05 step along one axis");
    for r in [0.0, 0.5, 0.9, 0.94] {
        let a = PoincarePoint::new(vec![r, 0.0])?;
        let b = PoincarePoint::new(vec![r + 0.05, 0.0])?;
        println!("  from r = {r:<4}  d = {:.4}", distance(&a, &b)?);
    }

    // members far from the centroid get less weight
    let members = vec![
        PoincarePoint::new(vec![0.10, 0.05])?,
        PoincarePoint::new(vec![0.12, 0.02])?,
        PoincarePoint::new(vec![-0.70, 0.60])?,
    ];
    let (proto, weights) = prototype_of(&members)?;
    println!("\nweighted prototype of three points, one outlying");
    for (m, w) in members.iter().zip(&weights) {
        println!("  {:?}  weight {w:.4}", m.coords());
    }
    println!("  prototype {:.4?}", proto.coords());

    // with zero weights the block only re-projects its input
    let mut tape = Tape::new();
    let y = tape.constant(Tensor::vector(vec![0.3, -0.2]));
    let w = tape.constant(Tensor::zeros(&[2, 2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let alpha = tape.constant(Tensor::scalar(1.0));
    let out = residual_hyperbolic_block(&mut tape, y, w, b, alpha)?;
    println!("\nresidual block with zero weights: (0.3, -0.2) -> {:.6?}", tape.value(out).data());
    Ok(())
}
