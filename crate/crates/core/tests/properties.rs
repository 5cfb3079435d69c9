//! Property tests over randomly constructed registries, prompts and schedules.

use factorlab::factorspace::{
    enumerate_full_space, novel_tuples, observed_tuples, Category, DatasetDescriptor,
    FactorCategory, FactorRegistry, FactorTuple,
};
use factorlab::multitrain::lr_schedule;
use factorlab::textencode::{assemble_prompt, Stage, L_MAX};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn value_names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

prop_compose! {
    fn arb_registry()(
        lens_n in 1usize..3,
        sensor_n in 1usize..5,
        view_n in 1usize..5,
        domain_n in 1usize..3,
        dataset_picks in proptest::collection::vec((0usize..3, 0usize..5, 0usize..5, 0usize..3, 1usize..4), 1..6),
    ) -> FactorRegistry {
        let categories = [
            FactorCategory { id: Category::Lens, value_names: value_names("l", lens_n) },
            FactorCategory { id: Category::Sensor, value_names: value_names("s", sensor_n) },
            FactorCategory { id: Category::Viewpoint, value_names: value_names("v", view_n) },
            FactorCategory { id: Category::Domain, value_names: value_names("d", domain_n) },
        ];
        let mut datasets = Vec::new();
        for (i, (l, s, v, d, view_span)) in dataset_picks.into_iter().enumerate() {
            let mut fixed = BTreeMap::new();
            let mut per_image = BTreeMap::new();
            fixed.insert(Category::Lens, format!("l{}", l % lens_n));
            fixed.insert(Category::Sensor, format!("s{}", s % sensor_n));
            fixed.insert(Category::Domain, format!("d{}", d % domain_n));
            let span = view_span.min(view_n);
            if span <= 1 {
                fixed.insert(Category::Viewpoint, format!("v{}", v % view_n));
            } else {
                let vs: Vec<String> = (0..span).map(|k| format!("v{}", (v + k) % view_n)).collect();
                per_image.insert(Category::Viewpoint, vs);
            }
            datasets.push(DatasetDescriptor {
                id: format!("ds{i}"),
                fixed_factors: fixed,
                per_image_factors: per_image,
                sample_count: 1,
            });
        }
        FactorRegistry { categories, datasets }
    }
}

proptest! {
    #[test]
    fn full_space_size_is_cardinality_product(reg in arb_registry()) {
        reg.validate().unwrap();
        let all = enumerate_full_space(&reg);
        let product: usize = Category::ALL
            .iter()
            .map(|&c| reg.category(c).value_names.len())
            .product();
        prop_assert_eq!(all.len(), product);
        // enumeration is deterministic
        prop_assert_eq!(&all, &enumerate_full_space(&reg));
    }

    #[test]
    fn observed_and_novel_partition_the_space(reg in arb_registry()) {
        reg.validate().unwrap();
        let full: std::collections::BTreeSet<FactorTuple> =
            enumerate_full_space(&reg).into_iter().collect();
        let observed = observed_tuples(&reg);
        let novel = novel_tuples(&reg);
        prop_assert!(observed.is_subset(&full));
        prop_assert!(novel.is_disjoint(&observed));
        let union: std::collections::BTreeSet<FactorTuple> =
            observed.union(&novel).cloned().collect();
        prop_assert_eq!(union, full);
    }

    #[test]
    fn prompt_expanded_length_is_exact(n in 1usize..20, caption_len in 1usize..16) {
        let tuple = FactorTuple::new("normal", "rgb", "front", "real");
        let caption = vec![1usize; caption_len];
        match assemble_prompt(&tuple, &caption, Stage::S1, None, n) {
            Ok(p) => {
                prop_assert_eq!(p.expanded_len(), 4 * n + caption_len);
                prop_assert!(p.expanded_len() <= L_MAX);
            }
            Err(factorlab::Error::PromptOverflow { len, max }) => {
                prop_assert_eq!(len, 4 * n + caption_len);
                prop_assert_eq!(max, L_MAX);
                prop_assert!(len > L_MAX);
            }
            Err(e) => prop_assert!(false, "unexpected error {}", e),
        }
    }

    #[test]
    fn lr_schedule_is_bounded_and_terminal(
        total in 10usize..5000,
        frac in 0.01f64..0.5,
        max_lr in 1e-6f64..1e-2,
    ) {
        for step in 0..=total {
            let lr = lr_schedule(step, total, frac, max_lr);
            prop_assert!(lr >= 0.0 && lr <= max_lr + 1e-15, "lr {} at step {}", lr, step);
        }
        prop_assert!(lr_schedule(total, total, frac, max_lr).abs() < 1e-12);
    }
}
