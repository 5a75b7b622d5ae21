import datetime

from daodet.datamodel import SyntheticConfig, make_synthetic_shift
from daodet.detector import infer, init_params
from daodet.trainer import Trainer, resolve_preset


def benchmark_preset(preset, pair, steps=20):
    config = resolve_preset(preset, {"batch_size": 8})
    trainer = Trainer(config, pair)
    state = trainer.initial_state(init_params(config.detector, 0))

    t = datetime.datetime.now()
    for step in range(steps):
        state, _ = trainer.train_step(state, trainer.next_batch(step))
    elapsed = datetime.datetime.now() - t
    print(
        "{:<20} {} steps in {} ({:.1f} images/second)".format(
            preset, steps, elapsed, steps * config.batch_size / elapsed.total_seconds()
        )
    )
    return state


def benchmark_inference(pair, images=50):
    config = resolve_preset("source_only").detector
    params = init_params(config, 0)
    records = list(pair.target_test)[:images]
    t = datetime.datetime.now()
    for record in records:
        infer(params, record, config)
    elapsed = datetime.datetime.now() - t
    print("inference: {} images in {}".format(len(records), elapsed))


def main():
    pair = make_synthetic_shift(SyntheticConfig(source_train=64, target_train=64, target_test=50), seed=0)
    benchmark_inference(pair)
    for preset in ("source_only", "mean_teacher_base", "sada_style", "aldi_pp"):
        benchmark_preset(preset, pair)


if __name__ == "__main__":
    import pstats, cProfile

    cProfile.runctx("main()", globals(), locals(), "profile.prof")
    s = pstats.Stats("profile.prof")
    s.strip_dirs().sort_stats("time").print_stats(30)
