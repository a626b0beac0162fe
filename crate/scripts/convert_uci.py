#!/usr/bin/env python3
"""Convert the raw UCI Adult and German Credit files into headered CSVs.

Usage: convert_uci.py <raw_dir> <out_dir>

<raw_dir> must contain adult.data, adult.test and german.data exactly as
distributed by the UCI repository.
"""
import csv
import json
import os
import sys

ADULT_COLS = [
    "age", "workclass", "fnlwgt", "education", "education_num",
    "marital_status", "occupation", "relationship", "race", "sex",
    "capital_gain", "capital_loss", "hours_per_week", "native_country",
    "income",
]
ADULT_CATEGORICAL = [
    "workclass", "education", "marital_status", "occupation",
    "relationship", "race", "native_country",
]

GERMAN_COLS = [
    "checking_status", "duration", "credit_history", "purpose",
    "credit_amount", "savings", "employment", "installment_rate",
    "personal_status", "other_parties", "residence_since", "property",
    "age", "other_installment_plans", "housing", "existing_credits", "job",
    "num_dependents", "telephone", "foreign_worker", "credit_risk",
]
GERMAN_CATEGORICAL = [
    "checking_status", "credit_history", "purpose", "savings", "employment",
    "personal_status", "other_parties", "property", "other_installment_plans",
    "housing", "job", "telephone",
]


def convert_adult(src, dst):
    with open(src) as f, open(dst, "w", newline="") as g:
        w = csv.writer(g, lineterminator="\n")
        w.writerow(ADULT_COLS)
        for line in f:
            line = line.strip()
            if not line or line.startswith("|"):
                continue
            cells = [c.strip() for c in line.split(",")]
            if len(cells) != len(ADULT_COLS):
                continue
            cells[-1] = cells[-1].rstrip(".")
            w.writerow(cells)


def convert_german(src, dst):
    with open(src) as f, open(dst, "w", newline="") as g:
        w = csv.writer(g, lineterminator="\n")
        w.writerow(GERMAN_COLS)
        for line in f:
            cells = line.split()
            if len(cells) == len(GERMAN_COLS):
                w.writerow(cells)


def main():
    raw, out = sys.argv[1], sys.argv[2]
    os.makedirs(os.path.join(out, "adult"), exist_ok=True)
    os.makedirs(os.path.join(out, "german"), exist_ok=True)
    convert_adult(os.path.join(raw, "adult.data"), os.path.join(out, "adult", "train.csv"))
    convert_adult(os.path.join(raw, "adult.test"), os.path.join(out, "adult", "test.csv"))
    convert_german(os.path.join(raw, "german.data"), os.path.join(out, "german", "train.csv"))
    adult = {
        "label_col": "income", "site_col": "sex", "covariate_col": "age",
        "positive_label": ">50K", "categorical_cols": ADULT_CATEGORICAL,
        "missing_token": "?",
    }
    # credit_risk: 1 = good, 2 = bad; the positive class is a default.
    german = {
        "label_col": "credit_risk", "site_col": "foreign_worker",
        "covariate_col": "age", "positive_label": "2",
        "categorical_cols": GERMAN_CATEGORICAL,
    }
    for name, schema in (("adult", adult), ("german", german)):
        with open(os.path.join(out, name, "schema.json"), "w") as g:
            json.dump(schema, g, indent=2)
            g.write("\n")


if __name__ == "__main__":
    main()
