# Test-time augmentation uncertainty harness for RaterLab
