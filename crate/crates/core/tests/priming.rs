mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seco_core::pairs::BoundingBox;
use seco_core::synthworld::{two_context_scene, CoocConfig};

#[test]
fn region_stub_map_peaks_inside_the_region() {
    let regions = [
        BoundingBox::new(0, 0, 112, 112),
        BoundingBox::new(0, 0, 28, 28),
        BoundingBox::new(196, 168, 28, 56),
        BoundingBox::new(100, 20, 8, 8),
        BoundingBox::new(56, 140, 84, 40),
    ];
    for r in regions {
        let share = common::stub_top_decile_share(r);
        assert!(share >= 0.9, "{r:?}: {share}");
    }
}

#[test]
fn two_context_scene_paints_each_background_where_asked() {
    let cfg = CoocConfig::default();
    let region = BoundingBox::new(0, 0, 112, 112);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = two_context_scene(&cfg, 0, 2, region, &mut rng).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert_eq!(img, two_context_scene(&cfg, 0, 2, region, &mut rng).unwrap());
    // Context 0 varies along y only and context 2 along x only, up to noise.
    let span = |xs: &[u8]| xs.iter().max().unwrap() - xs.iter().min().unwrap();
    let noise = 2 * cfg.render.noise.ceil() as u8 + 1;
    let row_inside: Vec<u8> = (0..112).map(|x| img.get_pixel(x, 50)[0]).collect();
    let col_outside: Vec<u8> = (112..224).map(|y| img.get_pixel(180, y)[0]).collect();
    assert!(span(&row_inside) <= noise && span(&col_outside) <= noise);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(two_context_scene(&cfg, 0, 9, region, &mut rng).is_err());
    assert!(two_context_scene(&cfg, 0, 1, BoundingBox::new(200, 0, 40, 40), &mut rng).is_err());
}
