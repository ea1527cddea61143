//! Library-level runs that cross module boundaries: weight to distance to
//! column to fit, and fields and operators through their file formats.

use std::fs::File;
use std::io::{BufReader, BufWriter};

use agmonlab::agmon::{agmon_distances, Connectivity};
use agmonlab::io::{read_field, read_triplets, write_complex, write_scalar, write_triplets, FieldData};
use agmonlab::par::with_threads;
use agmonlab::potential::{sample_potential, sample_vector_potential, MagneticModel, PotentialKind};
use agmonlab::schrodinger::{assemble, fundamental_columns, Boundary, CoefficientMatrix};
use agmonlab::sparse::CsrMatrix;
use agmonlab::verify::{default_sources, envelope_fit};
use agmonlab::weights::maximal_field;
use agmonlab::{ComplexField, Grid};

/// The whole decay pipeline for `|x|²` on a small grid, serialised.
fn decay_pipeline() -> (Vec<u64>, String) {
    let g = Grid::cube(-2.0, 2.0, 21).unwrap();
    let v = sample_potential(&PotentialKind::radial_power(2.0), &g).unwrap();
    let m = maximal_field(&v).unwrap();
    let ys = default_sources(&g, 3);
    let d = agmon_distances(&m, &ys, Connectivity::TwentySix).unwrap();
    let op = assemble(&v, None, &CoefficientMatrix::Identity, 0.0, Boundary::Asymptotic).unwrap();
    let cols: Vec<(usize, ComplexField)> =
        ys.iter().copied().zip(fundamental_columns(&op, &ys, 1e-10).unwrap()).collect();
    let rep = envelope_fit(&op, &cols, &d, &m, &g.inner_half_box()).unwrap();
    let bits = m.m_values.values().iter().chain(d[1].d_values.values()).map(|x| x.to_bits()).collect();
    (bits, serde_json::to_string(&rep).unwrap())
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let one = with_threads(1, decay_pipeline);
    let four = with_threads(4, decay_pipeline);
    assert_eq!(one.0, four.0);
    assert_eq!(one.1, four.1);
}

#[test]
fn fields_survive_agf1_files() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grid::cube(-1.0, 1.0, 9).unwrap();
    let v = sample_potential(&PotentialKind::radial_power(2.0), &g).unwrap();
    let m = maximal_field(&v).unwrap();
    let a = sample_vector_potential(&MagneticModel::uniform([0.0, 0.0, 2.0]), &g).unwrap();
    let op = assemble(&v, Some(&a), &CoefficientMatrix::Identity, 0.0, Boundary::Dirichlet).unwrap();
    let col = fundamental_columns(&op, &[g.index(4, 4, 4)], 1e-10).unwrap().remove(0);
    assert!(!col.is_real());

    let (pm, pc) = (dir.path().join("m.agf"), dir.path().join("col.agf"));
    write_scalar(&mut BufWriter::new(File::create(&pm).unwrap()), &m.m_values).unwrap();
    write_complex(&mut BufWriter::new(File::create(&pc).unwrap()), &col).unwrap();
    match read_field(&mut File::open(&pm).unwrap()).unwrap() {
        FieldData::Scalar(s) => assert_eq!(s, m.m_values),
        other => panic!("expected a scalar field, got {:?}", other.grid()),
    }
    match read_field(&mut File::open(&pc).unwrap()).unwrap() {
        FieldData::Complex(c) => assert_eq!(c, col),
        other => panic!("expected a complex field, got {:?}", other.grid()),
    }
}

#[test]
fn exported_operator_reproduces_its_action() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grid::cube(-1.0, 1.0, 11).unwrap();
    let v = sample_potential(&PotentialKind::constant(1.0), &g).unwrap();
    let a = sample_vector_potential(&MagneticModel::uniform([1.0, 0.5, 0.0]), &g).unwrap();
    let op = assemble(&v, Some(&a), &CoefficientMatrix::Identity, 0.25, Boundary::Asymptotic).unwrap();
    let path = dir.path().join("op.txt");
    write_triplets(&mut BufWriter::new(File::create(&path).unwrap()), g.len(), &op.triplets()).unwrap();
    let (n, entries) = read_triplets(BufReader::new(File::open(&path).unwrap())).unwrap();
    let back = CsrMatrix::from_triplets(n, &entries).unwrap();
    assert!(back.hermitian_defect() < 1e-14);
    let col = fundamental_columns(&op, &[g.index(5, 5, 5)], 1e-12).unwrap().remove(0);
    let direct = op.apply(&col).unwrap();
    let via_file = back.apply(col.values());
    for (x, y) in direct.values().iter().zip(&via_file) {
        assert!((x - y).norm() <= 1e-12 * (1.0 + x.norm()));
    }
}
