use loopfill_core::camera::{make_rig, RigSpec};
use loopfill_core::geometry::{carve_object, generate_object};
use loopfill_core::render::{Image, MaskImage, RenderSettings};
use loopfill_core::sequence::{
    attach_reference, close_loop, composite_known, detach_reference, open_loop, render_sequence, FrameSequence,
};
use proptest::prelude::*;

fn synthetic(views: usize, side: usize, seed: u64) -> FrameSequence {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 40) as f32 / (1u64 << 24) as f32
    };
    let frames = (0..views)
        .map(|_| Image::from_pixels(side, side, (0..side * side * 3).map(|_| next()).collect()).unwrap())
        .collect();
    let masks = (0..views)
        .map(|_| MaskImage::from_values(side, side, (0..side * side).map(|_| (next() < 0.3) as u8 as f32).collect()).unwrap())
        .collect();
    let poses = make_rig(&RigSpec { n_views: views, width: side, height: side, ..RigSpec::default() })
        .unwrap()
        .into_iter()
        .map(Some)
        .collect();
    FrameSequence { frames, masks, poses, loop_closed: false, reference_attached: false, label: 0 }
}

#[test]
fn rendered_bundles_close_to_four_n_plus_one() {
    let obj = generate_object(17, 32).unwrap();
    let carved = carve_object(&obj).unwrap();
    let rig = make_rig(&RigSpec { width: 24, height: 24, ..RigSpec::default() }).unwrap();
    let (seq, targets) = render_sequence(&obj.full, &carved, &obj.mask, &rig, &RenderSettings::default(), obj.label).unwrap();
    assert_eq!(targets.len(), 16);
    let closed = close_loop(&seq).unwrap();
    assert_eq!(closed.len() % 4, 1);
    assert_eq!(closed.frames.last(), closed.frames.first());
    assert_eq!(closed.masks.last(), closed.masks.first());
    assert_eq!(closed.poses.last(), closed.poses.first());
    closed.validate(true).unwrap();
    assert_eq!(open_loop(&closed).unwrap(), seq);
    assert!(close_loop(&closed).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn assembly_round_trips(views in 1usize..12, seed in any::<u64>()) {
        let seq = synthetic(views, 8, seed);
        let closed = close_loop(&seq).unwrap();
        prop_assert_eq!(closed.len(), views + 1);
        prop_assert_eq!(&closed.frames[views], &closed.frames[0]);
        prop_assert_eq!(&open_loop(&closed).unwrap(), &seq);

        let reference = synthetic(1, 8, seed ^ 1).frames.remove(0);
        let with_ref = attach_reference(&closed, &reference).unwrap();
        prop_assert!(with_ref.masks[0].is_all_zero());
        prop_assert_eq!(with_ref.poses[0], None);
        prop_assert_eq!(with_ref.orbital_len(), closed.orbital_len());
        prop_assert_eq!(&detach_reference(&with_ref).unwrap(), &closed);
        prop_assert!(attach_reference(&with_ref, &reference).is_err());
    }

    #[test]
    fn compositing_keeps_known_pixels(views in 1usize..6, seed in any::<u64>()) {
        let seq = synthetic(views, 8, seed);
        let generated = synthetic(views, 8, seed.wrapping_add(7)).frames;
        let out = composite_known(&generated, &seq).unwrap();
        for ((o, (f, m)), g) in out.iter().zip(seq.frames.iter().zip(&seq.masks)).zip(&generated) {
            for (i, mv) in m.values.iter().enumerate() {
                let src = if *mv == 0.0 { f } else { g };
                prop_assert_eq!(&o.pixels[3 * i..3 * i + 3], &src.pixels[3 * i..3 * i + 3]);
            }
        }
    }
}
