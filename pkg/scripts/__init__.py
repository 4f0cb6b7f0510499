"""声質属性比較（vTAD）パイプライン"""
