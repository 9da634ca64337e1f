# Utils package for RaterLab
