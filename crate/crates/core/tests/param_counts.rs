use ifr_core::blocks::{count_parameters, ChannelMultiplier, CountProfile, ParamSet, Strategy};
use ifr_core::training::HeadParams;

fn coco(strategy: Strategy, depth: usize, mult: ChannelMultiplier) -> ifr_core::blocks::HeadConfig {
    CountProfile::CocoMaskhead.head_config(strategy, depth, mult)
}

#[test]
fn mask_head_totals_round_to_the_published_values() {
    let implicit = count_parameters(&coco(Strategy::ImplicitBroyden, 15, ChannelMultiplier::One)).unwrap();
    let explicit = count_parameters(&coco(Strategy::ExplicitIndependent, 4, ChannelMultiplier::One)).unwrap();
    assert_eq!(implicit.millions_rounded(), 1.5);
    assert_eq!(explicit.millions_rounded(), 5.0);
    assert!((implicit.total as f64) / (explicit.total as f64) < 0.30);
}

#[test]
fn channel_multiplier_sweep_rounds_to_the_published_row() {
    let got: Vec<f64> = ChannelMultiplier::ALL
        .iter()
        .map(|&m| count_parameters(&coco(Strategy::ImplicitBroyden, 15, m)).unwrap().millions_rounded())
        .collect();
    assert_eq!(got, vec![0.4, 0.6, 0.9, 1.5, 2.6]);
}

/// The closed-form count agrees with the number of values an initialised
/// head actually holds.
#[test]
fn closed_form_matches_materialised_heads() {
    let mut cfgs = Vec::new();
    for profile in [CountProfile::Toy, CountProfile::CocoMaskhead] {
        for (s, d) in [
            (Strategy::ImplicitBroyden, 15),
            (Strategy::UnrolledShared, 4),
            (Strategy::ExplicitIndependent, 0),
            (Strategy::ExplicitIndependent, 2),
        ] {
            for m in ChannelMultiplier::ALL {
                cfgs.push(profile.head_config(s, d, m));
            }
        }
    }
    let mut no_dr = CountProfile::Toy.head_config(Strategy::ImplicitBroyden, 15, ChannelMultiplier::One);
    no_dr.double_residual = false;
    cfgs.push(no_dr);
    for cfg in cfgs {
        let params = HeadParams::init(&cfg, 0).unwrap();
        assert_eq!(count_parameters(&cfg).unwrap().total, params.num_learnable(), "{cfg:?}");
    }
}

#[test]
fn unknown_profile_is_rejected() {
    assert!("imagenet".parse::<CountProfile>().is_err());
    assert_eq!("coco-maskhead".parse::<CountProfile>().unwrap(), CountProfile::CocoMaskhead);
}
