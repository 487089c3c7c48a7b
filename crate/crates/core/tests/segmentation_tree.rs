use orl_core::imageio::{resize_bilinear, ImageBuffer};
use orl_core::rng;
use orl_core::segmentation::{grouping_hierarchy, rank_hierarchy, selective_search, SegParams};
use orl_core::synthetic::{generate_scene, SceneParams};
use rand::Rng;

fn test_images() -> Vec<ImageBuffer> {
    let mut imgs: Vec<ImageBuffer> = (0..3)
        .map(|id| {
            let (img, _) = generate_scene(1, id, &SceneParams::default()).unwrap();
            resize_bilinear(&img, 96, 96).unwrap()
        })
        .collect();
    let mut r = rng::stream(2, &[]);
    imgs.push(ImageBuffer::from_fn(40, 30, |_, _| r.random()).unwrap());
    imgs.push(ImageBuffer::filled(17, 9, [50, 60, 70]).unwrap());
    imgs.push(ImageBuffer::filled(1, 1, [0, 0, 0]).unwrap());
    imgs
}

#[test]
fn merge_tree_has_two_n_minus_one_regions() {
    for img in test_images() {
        let h = grouping_hierarchy(&img, &SegParams::default());
        let n = h.initial_count;
        assert!(n >= 1);
        assert_eq!(h.regions.len(), 2 * n - 1);
        assert_eq!(h.merge_similarities.len(), n - 1);
        // the root covers the whole image
        let root = h.regions.last().unwrap();
        assert_eq!(root.pixel_count, img.width() * img.height());
    }
}

#[test]
fn proposals_are_unique_sorted_and_inside() {
    for img in test_images() {
        let p = SegParams::default();
        let props = selective_search(&img, &p);
        let h = grouping_hierarchy(&img, &p);
        assert!(props.len() <= h.regions.len());
        assert_eq!(props, rank_hierarchy(&h, p.seed));
        for w in props.windows(2) {
            assert!(w[0].objectness >= w[1].objectness);
        }
        for (i, a) in props.iter().enumerate() {
            assert!(a.bbox.fits_within(img.width() as f64, img.height() as f64));
            assert!(props[i + 1..].iter().all(|b| b.bbox != a.bbox));
        }
    }
}
