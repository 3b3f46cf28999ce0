//! Every write/read pair is a bitwise round trip.

use dtilearn::io::{read_fsl, write_fsl, Semantics, StreamlineFile, VolumeFile, VolumeHeader};
use dtilearn::phantom::generate_scheme;
use dtilearn::Dims;
use proptest::prelude::*;

fn volume_strategy() -> impl Strategy<Value = VolumeFile> {
    (1usize..5, 1usize..5, 1usize..4, 1usize..4, any::<bool>()).prop_flat_map(|(nx, ny, nz, c, has_mask)| {
        let n = nx * ny * nz;
        let stored = n * (c + usize::from(has_mask));
        (prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), stored), Just((nx, ny, nz, c, has_mask)))
            .prop_map(|(data, (nx, ny, nz, c, has_mask))| {
                let mut header = VolumeHeader::new(Dims::new(nx, ny, nz), c, [1.0, 1.25, 2.5], Semantics::Scalar);
                header.has_mask = has_mask;
                header.divisor = Some(0.1);
                VolumeFile { header, data }
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn volume_round_trip(v in volume_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("v");
        v.write(&stem).unwrap();
        let back = VolumeFile::read(&stem).unwrap();
        prop_assert_eq!(&back.header, &v.header);
        let bits = |d: &[f32]| d.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.data), bits(&v.data));
    }

    #[test]
    fn streamline_round_trip(lines in prop::collection::vec(prop::collection::vec(prop::array::uniform3(-1e3f32..1e3), 0..20), 0..8)) {
        let f = StreamlineFile { spacing: [2.0, 2.0, 1.5], lines };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.sdts");
        f.write(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        prop_assert_eq!(StreamlineFile::read(&path).unwrap(), f);
        let points: usize = StreamlineFile::from_bytes(&path, &bytes).unwrap().lines.iter().map(Vec::len).sum();
        prop_assert_eq!(bytes.len(), 24 + 4 * (StreamlineFile::read(&path).unwrap().lines.len()) + 12 * points);
    }

    #[test]
    fn scheme_text_round_trip(m in 6usize..20, n_b0 in 1usize..3, seed in 0u64..1000) {
        let s = generate_scheme(m, 1000.0, n_b0, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("bvals"), dir.path().join("bvecs"));
        write_fsl(&s, &a, &b).unwrap();
        prop_assert_eq!(read_fsl(&a, &b).unwrap(), s);
    }
}
