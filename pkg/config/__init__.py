# Config package for RaterLab
