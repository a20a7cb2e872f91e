"""Forecast the bundled mortality-trend series with drift random walks.

Runs entirely off the data shipped inside the package: the pooled
global trend and the per-country young/old segment trends, 1961-2010.
Prints the fitted drifts and a side-by-side forecast table to 2019.
"""

import pandas as pd

from mortlme import data_path
from mortlme.covariates import fit_rwd, forecast_rwd


def load_series(path, **filters):
    frame = pd.read_csv(path, float_precision="round_trip")
    for column, value in filters.items():
        frame = frame[frame[column] == value]
    return dict(zip(frame["year"].astype(int), frame["value"].astype(float)))


def main():
    global_series = load_series(data_path("global_trend_1961_2010.csv"))
    walk = fit_rwd(global_series)
    print("pooled trend 1961-2010")
    print(f"  drift {walk.drift:+.6f} per year, innovation variance {walk.innovation_variance:.6f}")
    print(f"  forecast 2019: {forecast_rwd(walk, 9)[2019]:.3f}")
    print()

    trends = pd.read_csv(data_path("country_trends_1961_2010.csv"), float_precision="round_trip")
    rows = []
    for (country, segment), block in trends.groupby(["country", "segment"]):
        series = dict(zip(block["year"].astype(int), block["value"].astype(float)))
        walk = fit_rwd(series)
        path = forecast_rwd(walk, 9)
        rows.append(
            {
                "country": country,
                "segment": segment,
                "last (2010)": series[2010],
                "drift": walk.drift,
                "2015": path[2015],
                "2019": path[2019],
            }
        )
    table = pd.DataFrame(rows).sort_values(["country", "segment"])
    print("per-country segment trends, drift-path forecasts")
    print(table.to_string(index=False, float_format=lambda v: f"{v:8.3f}"))


if __name__ == "__main__":
    main()
