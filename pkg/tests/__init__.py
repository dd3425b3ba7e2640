# 解耦分片训练桌面实现 - 测试模块
