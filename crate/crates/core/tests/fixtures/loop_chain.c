#include <unistd.h>

/* root exits at once; three generations below it spin forever */
int main(void) {
    for (int level = 0; level < 3; level++) {
        pid_t pid = fork();
        if (pid < 0)
            return 1;
        if (pid > 0) {
            if (level == 0)
                return 0;
            for (;;)
                ;
        }
    }
    for (;;)
        ;
}
