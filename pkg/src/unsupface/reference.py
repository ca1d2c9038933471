"""Published reference numbers, kept as constants.

These come from a 5M-pair video corpus evaluated on LFW. Neither dataset
ships with this package, so nothing here is reproduced by the test suite;
the values are exposed for reports and for anyone wiring in real data.
Accuracy, EER and AUC are percentages.
"""

# (accuracy, EER, AUC) per descriptor and input side, without / with fine-tuning
VERIFICATION = {
    "lbp": {64: (64.60, 35.40, 70.79), 128: (64.60, 35.39, 70.39)},
    "random": {64: (60.54, 39.46, 64.97), 128: (61.55, 38.45, 65.72)},
    "supervised-vgg": {64: (62.38, 37.62, 67.21), 128: (62.55, 37.45, 67.43)},
    "unsupervised": {64: (71.48, 28.53, 78.78), 128: (71.48, 28.51, 78.40)},
}
VERIFICATION_FINETUNED = {
    "lbp": {64: (70.18, 29.82, 78.14), 128: (72.44, 27.56, 79.82)},
    "random": {64: (65.02, 34.98, 70.65), 128: (65.34, 34.66, 71.64)},
    "supervised-vgg": {64: (66.00, 34.00, 72.08), 128: (66.34, 33.67, 73.03)},
    "unsupervised": {64: (73.22, 26.78, 80.57), 128: (72.20, 27.79, 80.29)},
}

# 64x64 net, fine-tuned: projection size p -> (accuracy, AUC)
ABLATION_P = {128: (73.18, 80.30), 256: (73.22, 80.57), 512: (74.00, 81.41), 1000: (74.13, 81.66)}
# 64x64 net, fine-tuned: supervised pairs -> (accuracy, AUC)
ABLATION_PAIRS = {1000: (70.89, 78.62), 2000: (71.75, 79.40), 5000: (73.49, 80.38),
                  10000: (73.22, 80.57), 20000: (73.85, 81.13)}

# accuracy of the 64x64 net against millions of training pairs seen
LEARNING_CURVE = {0.3: 63.35, 0.64: 64.65, 1.28: 66.92, 1.6: 68.28, 5.0: 71.48}

DATASET = {"n_faces": 1_360_000, "n_tracks": 1904, "n_videos": 850, "mean_face_size": 67,
           "median_face_size": 56, "mean_track_length": 21, "n_similar_pairs": 2_500_000,
           "n_dissimilar_pairs": 2_500_000, "n_val_each": 6400}

PARAMETERS = {64: 17_000_000, 128: 24_000_000}
HARD_FRACTION = {64: 0.2807, 128: 0.1618}
HARD_MINING_ITERATION = {64: 28_000, 128: 50_000}
TOTAL_ITERATIONS = {64: 150_000, 128: 125_000}
LBP_DIMS = {64: 928, 128: 3712}
