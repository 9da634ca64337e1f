# Tests package for RaterLab
