use nmsparse::nm::{compress, decode_nmcx, decompress, encode_nmcx, mask_of, project, SparsityPattern};
use nmsparse::sad::{sad, MaskSnapshot};
use nmsparse::tensor::{decode_nmsp, encode_nmsp, DenseMatrix};
use proptest::prelude::*;

fn pattern_strategy() -> impl Strategy<Value = SparsityPattern> {
    prop_oneof![
        Just((1, 4)),
        Just((2, 4)),
        Just((2, 8)),
        Just((4, 8)),
        Just((1, 16)),
        Just((4, 4))
    ]
    .prop_map(|(n, m)| SparsityPattern::new(n, m).unwrap())
}

/// A pattern plus a matrix whose width splits into its groups.
fn case() -> impl Strategy<Value = (SparsityPattern, DenseMatrix<f32>)> {
    (pattern_strategy(), 1usize..6, 1usize..4).prop_flat_map(|(p, rows, groups)| {
        let cols = p.m() * groups;
        prop::collection::vec(prop_oneof![Just(0.0f32), -4.0f32..4.0], rows * cols)
            .prop_map(move |data| (p, DenseMatrix::new(rows, cols, data).unwrap()))
    })
}

proptest! {
    #[test]
    fn projection_is_idempotent_and_exact((p, w) in case()) {
        let (wt, mask) = project(&w, p).unwrap();
        prop_assert!(mask.is_exact(p));
        let (again, again_mask) = project(&wt, p).unwrap();
        prop_assert_eq!(&again, &wt);
        prop_assert_eq!(again_mask, mask.clone());
        prop_assert_eq!(mask_of(&w, p).unwrap(), mask);
    }

    #[test]
    fn compressed_roundtrip_through_bytes((p, w) in case()) {
        let (wt, _) = project(&w, p).unwrap();
        let c = compress(&wt, p).unwrap();
        let decoded = decode_nmcx(&encode_nmcx(&c)).unwrap();
        prop_assert_eq!(decompress(&decoded).unwrap(), wt);
    }

    #[test]
    fn nmsp_roundtrip((_, w) in case()) {
        let bytes = encode_nmsp(&w);
        let (back, end) = decode_nmsp(&bytes, 0).unwrap();
        prop_assert_eq!(end, bytes.len());
        prop_assert_eq!(back, w);
    }

    #[test]
    fn sad_is_a_metric((p, a) in case(), seed in any::<u32>()) {
        // second matrix: same shape, values permuted by the seed
        let mut data = a.data().to_vec();
        let len = data.len();
        data.rotate_left(seed as usize % len);
        let b = DenseMatrix::new(a.rows(), a.cols(), data).unwrap();
        let sa = MaskSnapshot { step: 0, masks: vec![mask_of(&a, p).unwrap()] };
        let sb = MaskSnapshot { step: 1, masks: vec![mask_of(&b, p).unwrap()] };
        let ab = sad(&sa, &sb).unwrap();
        let ba = sad(&sb, &sa).unwrap();
        prop_assert_eq!(ab.total, ba.total);
        prop_assert_eq!(sad(&sa, &sa).unwrap().total, 0);
        // exact masks flip in pairs within each group
        prop_assert_eq!(ab.total % 2, 0);
        prop_assert!(ab.normalized[0] <= 1.0);
    }
}
