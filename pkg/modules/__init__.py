# Modules package for the lesion co-segmentation pipeline
