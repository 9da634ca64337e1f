# Services package for RaterLab
