# Command-line interface for RaterLab
