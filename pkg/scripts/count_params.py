"""Trainable-parameter breakdown at BERT-base scale for the full model and each ablation."""
from pgfnet.experiments import ABLATIONS
from pgfnet.model import ModelConfig, count_trainable_params


def main():
    base = ModelConfig.full_scale()
    groups = list(count_trainable_params(base))
    print("variant".ljust(22) + "".join(g.rjust(18) for g in groups))
    for flags in ABLATIONS:
        counts = count_trainable_params(base.replace(ablation=flags))
        print(flags.label.ljust(22) + "".join(f"{counts[g]:>18,}" for g in groups))


if __name__ == "__main__":
    main()
