"""Print the peaks class boundaries stored in layertime.data.PEAKS_THRESHOLDS."""

from layertime.data import compute_peaks_thresholds

if __name__ == "__main__":
    for value in compute_peaks_thresholds():
        print(repr(value))
